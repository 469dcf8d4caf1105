#include "usgen/checkpoint.hpp"

#include <zlib.h>

#include <algorithm>
#include <bit>
#include <cstring>
#include <fstream>
#include <sstream>

namespace fs = std::filesystem;

namespace usgen {
namespace {

static_assert(std::endian::native == std::endian::little,
              "checkpoint I/O assumes a little-endian host");

constexpr char kMagic[8] = {'U', 'S', 'G', 'E', 'N', 'C', 'K', 'P'};

std::uint32_t crc_of(const void* data, std::size_t size) {
  uLong crc = crc32(0L, Z_NULL, 0);
  const auto* p = static_cast<const Bytef*>(data);
  while (size > 0) {
    const auto chunk = static_cast<uInt>(std::min<std::size_t>(size, 1u << 30));
    crc = crc32(crc, p, chunk);
    p += chunk;
    size -= chunk;
  }
  return static_cast<std::uint32_t>(crc);
}

template <typename T>
void write_pod(std::ostream& out, const T& v) {
  out.write(reinterpret_cast<const char*>(&v), sizeof v);
}

template <typename T>
bool read_pod(std::istream& in, T& v) {
  return static_cast<bool>(in.read(reinterpret_cast<char*>(&v), sizeof v));
}

}  // namespace

void ModelCheckpoint::put(const std::string& name, const torch::Tensor& value) {
  auto t = value.detach().to(torch::kFloat32).contiguous().clone();
  for (auto& [n, v] : arrays) {
    if (n == name) {
      v = t;
      return;
    }
  }
  arrays.emplace_back(name, t);
}

const torch::Tensor& ModelCheckpoint::get(const std::string& name) const {
  for (const auto& [n, v] : arrays) {
    if (n == name) return v;
  }
  throw LoadError("checkpoint has no array named '" + name + "'");
}

bool ModelCheckpoint::has(const std::string& name) const {
  return std::any_of(arrays.begin(), arrays.end(),
                     [&](const auto& kv) { return kv.first == name; });
}

void save_checkpoint(const ModelCheckpoint& ckpt, const fs::path& file) {
  nlohmann::json header;
  header["format_version"] = ckpt.format_version;
  header["pipeline"] = ckpt.pipeline;
  header["architecture"] = ckpt.architecture;
  header["stage"] = ckpt.stage;
  header["epoch"] = ckpt.epoch;
  header["rng"] = {{"seed", ckpt.rng.seed}, {"epoch", ckpt.rng.epoch}};
  header["created"] = ckpt.created;
  header["config"] = ckpt.config_text;
  header["extra"] = ckpt.extra;
  auto& dir = header["arrays"] = nlohmann::json::array();
  std::uint64_t offset = 0;
  for (const auto& [name, tensor] : ckpt.arrays) {
    const auto bytes = static_cast<std::uint64_t>(tensor.numel()) * sizeof(float);
    dir.push_back({{"name", name},
                   {"shape", tensor.sizes().vec()},
                   {"offset", offset},
                   {"bytes", bytes},
                   {"crc32", crc_of(tensor.data_ptr<float>(), bytes)}});
    offset += bytes;
  }
  header["payload_bytes"] = offset;
  const std::string text = header.dump();

  if (file.has_parent_path()) fs::create_directories(file.parent_path());
  const fs::path tmp = file.string() + ".tmp";
  {
    std::ofstream out(tmp, std::ios::binary | std::ios::trunc);
    if (!out) throw Error("cannot write checkpoint: " + file.string());
    out.write(kMagic, sizeof kMagic);
    write_pod(out, ckpt.format_version);
    write_pod(out, static_cast<std::uint64_t>(text.size()));
    out.write(text.data(), static_cast<std::streamsize>(text.size()));
    write_pod(out, crc_of(text.data(), text.size()));
    for (const auto& [name, tensor] : ckpt.arrays) {
      out.write(reinterpret_cast<const char*>(tensor.data_ptr<float>()),
                static_cast<std::streamsize>(tensor.numel() * sizeof(float)));
    }
    if (!out) throw Error("short write on checkpoint: " + file.string());
  }
  fs::rename(tmp, file);
}

ModelCheckpoint load_checkpoint(const fs::path& file) {
  std::ifstream in(file, std::ios::binary);
  if (!in) throw LoadError("cannot open checkpoint: " + file.string());
  const std::string where = " (" + file.string() + ")";

  char magic[8];
  if (!in.read(magic, sizeof magic) || std::memcmp(magic, kMagic, sizeof magic) != 0) {
    throw ChecksumError("not a checkpoint file or bad magic" + where);
  }
  std::uint32_t version = 0;
  if (!read_pod(in, version)) throw ChecksumError("truncated checkpoint header" + where);
  if (version != kCheckpointFormatVersion) {
    throw VersionError("unsupported checkpoint format version " + std::to_string(version) +
                       " (this reader supports version " +
                       std::to_string(kCheckpointFormatVersion) + ")" + where);
  }
  std::uint64_t header_bytes = 0;
  if (!read_pod(in, header_bytes) || header_bytes > (1ull << 32)) {
    throw ChecksumError("truncated or corrupt checkpoint header" + where);
  }
  std::string text(header_bytes, '\0');
  std::uint32_t header_crc = 0;
  if (!in.read(text.data(), static_cast<std::streamsize>(header_bytes)) ||
      !read_pod(in, header_crc)) {
    throw ChecksumError("truncated checkpoint header" + where);
  }
  if (crc_of(text.data(), text.size()) != header_crc) {
    throw ChecksumError("checkpoint header checksum mismatch" + where);
  }

  const auto header = nlohmann::json::parse(text);
  ModelCheckpoint ckpt;
  ckpt.format_version = version;
  ckpt.pipeline = header.at("pipeline").get<std::string>();
  ckpt.architecture = header.at("architecture").get<std::map<std::string, std::string>>();
  ckpt.stage = header.at("stage").get<std::string>();
  ckpt.epoch = header.at("epoch").get<std::int64_t>();
  ckpt.rng.seed = header.at("rng").at("seed").get<std::uint64_t>();
  ckpt.rng.epoch = header.at("rng").at("epoch").get<std::int64_t>();
  ckpt.created = header.at("created").get<std::string>();
  ckpt.config_text = header.at("config").get<std::string>();
  ckpt.extra = header.at("extra");

  for (const auto& entry : header.at("arrays")) {
    const auto name = entry.at("name").get<std::string>();
    const auto shape = entry.at("shape").get<std::vector<std::int64_t>>();
    const auto bytes = entry.at("bytes").get<std::uint64_t>();
    auto tensor = torch::empty(shape, torch::kFloat32);
    if (static_cast<std::uint64_t>(tensor.numel()) * sizeof(float) != bytes) {
      throw ChecksumError("array '" + name + "' size disagrees with its shape" + where);
    }
    if (!in.read(reinterpret_cast<char*>(tensor.data_ptr<float>()),
                 static_cast<std::streamsize>(bytes))) {
      throw ChecksumError("checkpoint truncated inside array '" + name + "'" + where);
    }
    if (crc_of(tensor.data_ptr<float>(), bytes) != entry.at("crc32").get<std::uint32_t>()) {
      throw ChecksumError("checksum mismatch in array '" + name + "'" + where);
    }
    ckpt.arrays.emplace_back(name, std::move(tensor));
  }
  if (in.peek() != std::char_traits<char>::eof()) {
    throw ChecksumError("trailing bytes after checkpoint payload" + where);
  }
  return ckpt;
}

void put_module(ModelCheckpoint& ckpt, const std::string& prefix,
                const torch::nn::Module& module) {
  for (const auto& p : module.named_parameters(true)) ckpt.put(prefix + "/" + p.key(), p.value());
  for (const auto& b : module.named_buffers(true)) ckpt.put(prefix + "/" + b.key(), b.value());
}

void load_module(const ModelCheckpoint& ckpt, const std::string& prefix,
                 torch::nn::Module& module) {
  torch::NoGradGuard no_grad;
  auto copy = [&](const std::string& key, torch::Tensor target) {
    const auto& src = ckpt.get(prefix + "/" + key);
    if (src.sizes() != target.sizes()) {
      throw ConfigMismatchError("shape mismatch for " + prefix + "/" + key + ": saved " +
                                shape_str(src) + " vs model " + shape_str(target));
    }
    target.copy_(src);
  };
  for (auto& p : module.named_parameters(true)) copy(p.key(), p.value());
  for (auto& b : module.named_buffers(true)) copy(b.key(), b.value());
}

std::vector<std::string> architecture_diff(const std::map<std::string, std::string>& saved,
                                           const std::map<std::string, std::string>& current) {
  std::vector<std::string> out;
  auto fmt = [](const std::map<std::string, std::string>& m, const std::string& k) {
    auto it = m.find(k);
    return it == m.end() ? std::string("<absent>") : it->second;
  };
  std::vector<std::string> keys;
  for (const auto& [k, v] : saved) keys.push_back(k);
  for (const auto& [k, v] : current) {
    if (!saved.count(k)) keys.push_back(k);
  }
  std::sort(keys.begin(), keys.end());
  for (const auto& k : keys) {
    const auto a = fmt(saved, k);
    const auto b = fmt(current, k);
    if (a != b) out.push_back(k + ": saved=" + a + " current=" + b);
  }
  return out;
}

void require_same_architecture(const std::map<std::string, std::string>& saved,
                               const std::map<std::string, std::string>& current) {
  const auto diff = architecture_diff(saved, current);
  if (diff.empty()) return;
  std::string msg = "architecture mismatch:";
  for (const auto& d : diff) msg += "\n  " + d;
  throw ConfigMismatchError(msg);
}

}  // namespace usgen
