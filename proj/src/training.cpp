#include "usgen/training.hpp"

#include <cmath>
#include <cstdio>
#include <fstream>
#include <sstream>

namespace usgen {

std::string to_string(EpochUnit unit) {
  return unit == EpochUnit::Epoch ? "epoch" : "step";
}

EpochUnit parse_epoch_unit(std::string_view text) {
  if (text == "epoch" || text == "epochs") return EpochUnit::Epoch;
  if (text == "step" || text == "steps") return EpochUnit::Step;
  throw ConfigError("epoch_unit must be 'epoch' or 'step', got '" + std::string(text) + "'");
}

std::vector<std::vector<std::size_t>> unit_batches(std::size_t dataset_size,
                                                   const StageOptions& opts,
                                                   std::uint64_t stage_tag,
                                                   std::int64_t epoch) {
  if (dataset_size == 0) throw EmptyDatasetError("training stage has no images");
  if (opts.batch_size < 1) throw ConfigError("batch_size must be >= 1");
  const auto order = dataset::shuffled_order(
      dataset_size,
      derive_seed(opts.seed, {stage_tag, 1, static_cast<std::uint64_t>(epoch)}));
  std::vector<std::vector<std::size_t>> batches;
  if (opts.unit == EpochUnit::Step) {
    const std::size_t take = std::min(opts.batch_size, dataset_size);
    batches.emplace_back(order.begin(), order.begin() + static_cast<std::ptrdiff_t>(take));
    return batches;
  }
  for (std::size_t start = 0; start < dataset_size; start += opts.batch_size) {
    const std::size_t end = std::min(start + opts.batch_size, dataset_size);
    batches.emplace_back(order.begin() + static_cast<std::ptrdiff_t>(start),
                         order.begin() + static_cast<std::ptrdiff_t>(end));
  }
  return batches;
}

ImageBatch gather_batch(const ImageBatch& data, const std::vector<std::size_t>& indices,
                        const StageOptions& opts, std::uint64_t augment_seed) {
  std::vector<std::int64_t> idx(indices.begin(), indices.end());
  auto batch = data.index_select(0, torch::tensor(idx, torch::kLong));
  if (opts.use_augment) batch = dataset::augment(batch, opts.augment, augment_seed);
  return batch;
}

void TraceTable::add(std::vector<double> row) {
  if (row.size() != columns.size()) throw ShapeError("trace row width mismatch");
  rows.push_back(std::move(row));
}

std::vector<double> TraceTable::column(std::string_view name) const {
  for (std::size_t c = 0; c < columns.size(); ++c) {
    if (columns[c] != name) continue;
    std::vector<double> out;
    out.reserve(rows.size());
    for (const auto& r : rows) out.push_back(r[c]);
    return out;
  }
  throw Error("trace has no column '" + std::string(name) + "'");
}

void TraceTable::write_csv(const std::filesystem::path& file) const {
  if (file.has_parent_path()) std::filesystem::create_directories(file.parent_path());
  std::ofstream out(file, std::ios::binary);
  if (!out) throw Error("cannot write trace: " + file.string());
  for (std::size_t c = 0; c < columns.size(); ++c) out << (c ? "," : "") << columns[c];
  out << '\n';
  char buf[40];
  for (const auto& r : rows) {
    for (std::size_t c = 0; c < r.size(); ++c) {
      if (columns[c] == "epoch") {
        std::snprintf(buf, sizeof buf, "%lld", static_cast<long long>(r[c]));
      } else {
        std::snprintf(buf, sizeof buf, "%.9g", r[c]);
      }
      out << (c ? "," : "") << buf;
    }
    out << '\n';
  }
}

TraceTable read_trace_csv(const std::filesystem::path& file) {
  std::ifstream in(file, std::ios::binary);
  if (!in) throw LoadError("cannot read trace: " + file.string());
  TraceTable t;
  std::string line;
  if (!std::getline(in, line)) throw LoadError("empty trace file: " + file.string());
  {
    std::stringstream ss(line);
    std::string col;
    while (std::getline(ss, col, ',')) t.columns.push_back(col);
  }
  while (std::getline(in, line)) {
    if (line.empty()) continue;
    std::vector<double> row;
    std::stringstream ss(line);
    std::string cell;
    while (std::getline(ss, cell, ',')) row.push_back(std::stod(cell));
    t.add(std::move(row));
  }
  return t;
}

void require_finite(double value, std::string_view what, std::int64_t step) {
  if (!std::isfinite(value)) {
    throw NumericError("non-finite " + std::string(what) + " at step " + std::to_string(step));
  }
}

}  // namespace usgen
