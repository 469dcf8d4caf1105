#include "usgen/imageops.hpp"

#include <cmath>
#include <cstdio>
#include <fstream>
#include <sstream>

namespace usgen::imageops {
namespace {

void accumulate(const torch::Tensor& values, std::array<std::uint64_t, kLevels>& counts) {
  const auto flat = values.detach().to(torch::kFloat32).contiguous().view(-1);
  const float* p = flat.data_ptr<float>();
  for (std::int64_t i = 0; i < flat.numel(); ++i) ++counts[quantize(p[i])];
}

}  // namespace

std::uint8_t quantize(float value) { return dataset::denormalize(value); }

IntensityCDF cdf_from_counts(const std::array<std::uint64_t, kLevels>& counts) {
  std::uint64_t total = 0;
  for (auto c : counts) total += c;
  IntensityCDF out;
  if (total == 0) return out;
  std::uint64_t running = 0;
  for (int k = 0; k < kLevels; ++k) {
    running += counts[k];
    out.cdf[k] = static_cast<double>(running) / static_cast<double>(total);
  }
  return out;
}

IntensityCDF compute_cdf(const torch::Tensor& channel) {
  if (channel.dim() != 2 || channel.numel() == 0) {
    throw ShapeError("compute_cdf: expected a nonempty 2-D channel, got " +
                     shape_str(channel));
  }
  std::array<std::uint64_t, kLevels> counts{};
  accumulate(channel, counts);
  return cdf_from_counts(counts);
}

std::array<std::uint8_t, kLevels> matching_lut(const IntensityCDF& source,
                                               const IntensityCDF& reference) {
  std::array<std::uint8_t, kLevels> lut{};
  int r = 0;
  // Source CDF is nondecreasing, so the target level only moves forward.
  for (int s = 0; s < kLevels; ++s) {
    while (r < kLevels - 1 && reference.cdf[r] < source.cdf[s]) ++r;
    lut[s] = static_cast<std::uint8_t>(r);
  }
  return lut;
}

ImageBatch histogram_match(const ImageBatch& source, const IntensityCDF& reference) {
  check_image_batch(source, "histogram_match");
  if (source.numel() == 0) throw ShapeError("histogram_match: empty batch");
  auto src = source.detach().to(torch::kFloat32).contiguous();
  auto out = torch::empty_like(src);
  const auto n = src.size(0);
  const auto channels = src.size(1);
  const auto plane = src.size(2) * src.size(3);
  const float* in = src.data_ptr<float>();
  float* dst = out.data_ptr<float>();

  for (std::int64_t i = 0; i < n; ++i) {
    for (std::int64_t c = 0; c < channels; ++c) {
      const float* p = in + (i * channels + c) * plane;
      float* q = dst + (i * channels + c) * plane;
      std::array<std::uint64_t, kLevels> counts{};
      for (std::int64_t k = 0; k < plane; ++k) ++counts[quantize(p[k])];
      const auto lut = matching_lut(cdf_from_counts(counts), reference);
      for (std::int64_t k = 0; k < plane; ++k) {
        q[k] = dataset::normalize(lut[quantize(p[k])]);
      }
    }
  }
  return out;
}

IntensityCDF pooled_cdf(const ImageBatch& images) {
  if (images.numel() == 0) throw ShapeError("pooled_cdf: no pixels");
  std::array<std::uint64_t, kLevels> counts{};
  accumulate(images, counts);
  return cdf_from_counts(counts);
}

IntensityCDF build_reference_pool(const dataset::DatasetManifest& manifest,
                                  std::size_t sample_count, std::uint64_t seed,
                                  int target_size, int channels) {
  if (manifest.count() == 0) {
    throw EmptyDatasetError("build_reference_pool: empty manifest");
  }
  if (sample_count < 1) throw ConfigError("reference pool needs sample_count >= 1");
  const auto order = dataset::shuffled_order(manifest.count(), seed);
  const std::size_t take = std::min(sample_count, manifest.count());
  std::array<std::uint64_t, kLevels> counts{};
  for (std::size_t k = 0; k < take; ++k) {
    accumulate(dataset::load_image(manifest.records[order[k]], target_size, channels),
               counts);
  }
  return cdf_from_counts(counts);
}

double ks_distance(const IntensityCDF& a, const IntensityCDF& b) {
  double d = 0.0;
  for (int k = 0; k < kLevels; ++k) d = std::max(d, std::abs(a.cdf[k] - b.cdf[k]));
  return d;
}

void save_cdf(const IntensityCDF& cdf, const std::filesystem::path& file) {
  if (file.has_parent_path()) std::filesystem::create_directories(file.parent_path());
  std::ofstream out(file, std::ios::binary);
  if (!out) throw Error("cannot write CDF file: " + file.string());
  char buf[64];
  for (int k = 0; k < kLevels; ++k) {
    std::snprintf(buf, sizeof buf, "%d\t%.17g\n", k, cdf.cdf[k]);
    out << buf;
  }
}

IntensityCDF load_cdf(const std::filesystem::path& file) {
  std::ifstream in(file, std::ios::binary);
  if (!in) throw LoadError("cannot read CDF file: " + file.string());
  IntensityCDF cdf;
  std::array<bool, kLevels> seen{};
  std::string line;
  while (std::getline(in, line)) {
    if (line.empty()) continue;
    std::istringstream ss(line);
    int level = -1;
    double value = 0.0;
    if (!(ss >> level >> value) || level < 0 || level >= kLevels) {
      throw LoadError("malformed CDF line in " + file.string() + ": " + line);
    }
    cdf.cdf[level] = value;
    seen[level] = true;
  }
  for (int k = 0; k < kLevels; ++k) {
    if (!seen[k]) throw LoadError("CDF file misses level " + std::to_string(k));
    if (k > 0 && cdf.cdf[k] < cdf.cdf[k - 1]) {
      throw LoadError("CDF file is not monotone at level " + std::to_string(k));
    }
  }
  return cdf;
}

}  // namespace usgen::imageops
