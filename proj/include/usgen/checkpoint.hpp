#pragma once

#include "usgen/common.hpp"

#include <json.hpp>

#include <cstdint>
#include <filesystem>
#include <map>
#include <string>
#include <utility>
#include <vector>

namespace usgen {

inline constexpr std::uint32_t kCheckpointFormatVersion = 1;

/// Stateless RNG position: every random draw in training is a function of
/// (seed, stage, epoch, batch), so this is the whole generator state.
struct RngState {
  std::uint64_t seed = 0;
  std::int64_t epoch = 0;
};

/// File layout (all integers little-endian):
///
///   "USGENCKP"  u32 format_version  u64 header_bytes  header(JSON)
///   u32 crc32(header)  array payloads (float32, directory order)
///
/// The header carries the pipeline tag, architecture echo, stage/epoch,
/// RNG state, optimizer counters, the effective config text and the array
/// directory (name, shape, byte offset, crc32 of each payload).
struct ModelCheckpoint {
  std::uint32_t format_version = kCheckpointFormatVersion;
  std::string pipeline;
  std::map<std::string, std::string> architecture;
  std::vector<std::pair<std::string, torch::Tensor>> arrays;
  nlohmann::json extra = nlohmann::json::object();  // optimizer steps, APA state, ...
  std::string stage;
  std::int64_t epoch = 0;
  RngState rng;
  std::string created;
  std::string config_text;

  void put(const std::string& name, const torch::Tensor& value);
  const torch::Tensor& get(const std::string& name) const;
  bool has(const std::string& name) const;
};

void save_checkpoint(const ModelCheckpoint& ckpt, const std::filesystem::path& file);

/// Throws ChecksumError on truncation or corruption and VersionError when
/// the file's format version is not the one this reader understands.
ModelCheckpoint load_checkpoint(const std::filesystem::path& file);

/// Stores every parameter and buffer of `module` under `<prefix>/`.
void put_module(ModelCheckpoint& ckpt, const std::string& prefix,
                const torch::nn::Module& module);

/// Copies `<prefix>/...` arrays into the module, checking names and shapes.
void load_module(const ModelCheckpoint& ckpt, const std::string& prefix,
                 torch::nn::Module& module);

/// Keys whose values differ (or exist on one side only), formatted as
/// `key: saved=<a> current=<b>`.
std::vector<std::string> architecture_diff(const std::map<std::string, std::string>& saved,
                                           const std::map<std::string, std::string>& current);

/// Throws ConfigMismatchError listing every differing key.
void require_same_architecture(const std::map<std::string, std::string>& saved,
                               const std::map<std::string, std::string>& current);

}  // namespace usgen
