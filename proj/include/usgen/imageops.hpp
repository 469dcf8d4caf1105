#pragma once

#include "usgen/common.hpp"
#include "usgen/dataset.hpp"

#include <array>
#include <cstdint>
#include <filesystem>

namespace usgen::imageops {

inline constexpr int kLevels = 256;

/// Empirical CDF over 8-bit intensity levels: cdf[k] is the fraction of
/// pixels at level <= k. Each entry is computed as count / total, so equal
/// fractions from different populations compare exactly equal.
struct IntensityCDF {
  std::array<double, kLevels> cdf{};

  bool operator==(const IntensityCDF&) const = default;
};

/// Level in [0, 255] of a [-1, 1] value; same rounding as image export.
std::uint8_t quantize(float value);

IntensityCDF cdf_from_counts(const std::array<std::uint64_t, kLevels>& counts);

/// `channel` is a 2-D array of [-1, 1] intensities.
IntensityCDF compute_cdf(const torch::Tensor& channel);

/// Smallest level r with reference[r] >= source[s], for every s.
std::array<std::uint8_t, kLevels> matching_lut(const IntensityCDF& source,
                                               const IntensityCDF& reference);

/// Matches every channel of every image independently against the same
/// reference CDF. Output values are 8-bit levels mapped back to [-1, 1].
ImageBatch histogram_match(const ImageBatch& source, const IntensityCDF& reference);

/// CDF pooled over the pixels of `sample_count` seed-selected records.
IntensityCDF build_reference_pool(const dataset::DatasetManifest& manifest,
                                  std::size_t sample_count, std::uint64_t seed,
                                  int target_size = 128, int channels = 1);

/// Same, over an already loaded image batch.
IntensityCDF pooled_cdf(const ImageBatch& images);

/// Largest vertical gap between two CDFs.
double ks_distance(const IntensityCDF& a, const IntensityCDF& b);

/// 256 lines of `level<TAB>cdf_value`.
void save_cdf(const IntensityCDF& cdf, const std::filesystem::path& file);
IntensityCDF load_cdf(const std::filesystem::path& file);

}  // namespace usgen::imageops
