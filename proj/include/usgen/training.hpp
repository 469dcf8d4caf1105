#pragma once

#include "usgen/common.hpp"
#include "usgen/dataset.hpp"

#include <cstdint>
#include <filesystem>
#include <string>
#include <string_view>
#include <vector>

namespace usgen {

/// What one unit of a configured "epochs" count means. The text gives
/// iteration counts in epochs, but the unit is kept explicit in configs.
enum class EpochUnit { Epoch, Step };

std::string to_string(EpochUnit unit);
EpochUnit parse_epoch_unit(std::string_view text);

struct StageOptions {
  std::int64_t epochs = 0;
  EpochUnit unit = EpochUnit::Epoch;
  std::size_t batch_size = 16;
  std::uint64_t seed = 0;
  dataset::AugmentConfig augment;
  bool use_augment = true;
};

/// Dataset positions visited during one unit of training. Epoch: every
/// image once in a seeded order, split into batches. Step: a single
/// seeded batch.
std::vector<std::vector<std::size_t>> unit_batches(std::size_t dataset_size,
                                                   const StageOptions& opts,
                                                   std::uint64_t stage_tag,
                                                   std::int64_t epoch);

/// Gathers rows of `data` and applies the stage augmentation.
ImageBatch gather_batch(const ImageBatch& data, const std::vector<std::size_t>& indices,
                        const StageOptions& opts, std::uint64_t augment_seed);

/// Per-epoch numbers emitted by a training stage, written as CSV.
struct TraceTable {
  std::vector<std::string> columns;
  std::vector<std::vector<double>> rows;

  void add(std::vector<double> row);
  bool empty() const { return rows.empty(); }
  std::vector<double> column(std::string_view name) const;
  void write_csv(const std::filesystem::path& file) const;
};

TraceTable read_trace_csv(const std::filesystem::path& file);

/// Raises NumericError when `value` is not finite.
void require_finite(double value, std::string_view what, std::int64_t step);

}  // namespace usgen
