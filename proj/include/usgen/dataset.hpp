#pragma once

#include "usgen/common.hpp"

#include <cstdint>
#include <filesystem>
#include <optional>
#include <string>
#include <string_view>
#include <utility>
#include <vector>

namespace usgen::dataset {

enum class Plane { TransCerebellum, TransThalamic, Other };

std::string to_string(Plane plane);
Plane parse_plane(std::string_view text);

/// Plane label implied by a file path: any component mentioning
/// "cerebell" or "thalam" (case-insensitive) decides, otherwise Other.
Plane infer_plane(const std::filesystem::path& path);

struct ImageRecord {
  std::filesystem::path path;
  Plane plane = Plane::Other;
  int width = 0;
  int height = 0;
};

/// Records sorted lexicographically by path. `plane` is the filter the
/// manifest was built with; Other means unfiltered.
struct DatasetManifest {
  std::vector<ImageRecord> records;
  Plane plane = Plane::Other;
  std::string checksum;

  std::size_t count() const { return records.size(); }
};

std::string manifest_checksum(const std::vector<ImageRecord>& records);

struct ScanResult {
  DatasetManifest manifest;
  std::vector<std::string> warnings;  // skipped files, one line each
};

/// Walks `root` recursively. Throws EmptyDatasetError when nothing
/// readable matches the filter.
ScanResult scan_dataset(const std::filesystem::path& root, Plane plane);

/// `path<TAB>plane<TAB>width<TAB>height`, LF terminated, sorted by path.
void save_manifest(const DatasetManifest& manifest,
                   const std::filesystem::path& file);
DatasetManifest load_manifest(const std::filesystem::path& file);

// 8-bit <-> [-1, 1] affine map. denormalize(normalize(v)) == v for all v.
float normalize(std::uint8_t value);
std::uint8_t denormalize(float value);

/// Decodes, center-crops to the largest square, bilinearly resizes to
/// target_size, converts to `channels` (1: luminance, 3: RGB) and scales to
/// [-1, 1]. Returns a 1 x channels x target_size x target_size batch.
ImageBatch load_image(const ImageRecord& record, int target_size,
                      int channels);

/// Same pipeline as load_image for a path, without a manifest record.
ImageBatch load_image_file(const std::filesystem::path& path, int target_size,
                           int channels);

/// Loads every record, in manifest order.
ImageBatch load_all(const DatasetManifest& manifest, int target_size,
                    int channels);

/// Writes one image of a batch as an 8-bit PNG (1 or 3 channels).
void save_png(const ImageBatch& batch, std::int64_t index,
              const std::filesystem::path& file);

class AugmentConfig {
 public:
  AugmentConfig() = default;
  AugmentConfig(double flip_prob, std::pair<double, double> zoom_range,
                std::pair<double, double> rotation_range_deg);

  static AugmentConfig identity() { return {0.0, {1.0, 1.0}, {0.0, 0.0}}; }

  double flip_prob() const { return flip_prob_; }
  std::pair<double, double> zoom_range() const { return zoom_; }
  std::pair<double, double> rotation_range_deg() const { return rotation_; }

  bool operator==(const AugmentConfig&) const = default;

 private:
  double flip_prob_ = 0.5;
  std::pair<double, double> zoom_{0.9, 1.1};
  std::pair<double, double> rotation_{-10.0, 10.0};
};

/// Per image: horizontal flip with flip_prob, zoom about the center, then
/// rotation, resampled bilinearly with reflect padding. Pure function of
/// (batch, cfg, seed).
ImageBatch augment(const ImageBatch& batch, const AugmentConfig& cfg,
                   std::uint64_t seed);

/// Seeded Fisher-Yates permutation of [0, n).
std::vector<std::size_t> shuffled_order(std::size_t n, std::uint64_t seed);

struct Batch {
  ImageBatch images;
  std::vector<std::size_t> indices;  // manifest positions, in batch order
};

/// One epoch over a manifest: every record once, in seed-determined order;
/// the final partial batch is yielded as-is. Images load lazily unless a
/// preloaded tensor (rows in manifest order) is supplied.
class BatchIterator {
 public:
  BatchIterator(DatasetManifest manifest, std::size_t batch_size,
                int target_size, int channels, std::uint64_t shuffle_seed);
  BatchIterator(ImageBatch preloaded, std::size_t batch_size,
                std::uint64_t shuffle_seed);

  std::optional<Batch> next();
  std::size_t batch_count() const;
  const std::vector<std::size_t>& order() const { return order_; }

 private:
  std::optional<DatasetManifest> manifest_;
  ImageBatch preloaded_;
  std::size_t batch_size_;
  int target_size_ = 0;
  int channels_ = 1;
  std::vector<std::size_t> order_;
  std::size_t cursor_ = 0;
};

BatchIterator make_batches(const DatasetManifest& manifest,
                           std::size_t batch_size, int target_size,
                           int channels, std::uint64_t shuffle_seed);

}  // namespace usgen::dataset
