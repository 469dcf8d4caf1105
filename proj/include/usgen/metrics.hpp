#pragma once

#include "usgen/common.hpp"
#include "usgen/dataset.hpp"

#include <Eigen/Dense>

#include <filesystem>
#include <memory>
#include <string>
#include <vector>

namespace usgen::metrics {

/// Maps an image batch to a (batch, feature_dim) float64 matrix.
class FeatureExtractor {
 public:
  virtual ~FeatureExtractor() = default;
  virtual std::string name() const = 0;
  virtual int feature_dim() const = 0;
  /// Hash of the weights, embedded in every report.
  virtual std::string checksum() const = 0;

  /// Resizes to the expected input internally. Raises NumericError naming the
  /// checksum when a feature is not finite.
  torch::Tensor extract(const ImageBatch& batch);

 protected:
  virtual torch::Tensor forward(const torch::Tensor& batch) = 0;
  virtual void verify_weights() const {}
};

/// Small fixed-seed convolutional encoder: 64x64 grey input, three strided
/// convolutions, global average pool, 64 features.
class TinyEncoder : public FeatureExtractor {
 public:
  static constexpr int kInputSize = 64;
  static constexpr std::uint64_t kWeightSeed = 0x5eed'f1d0ULL;

  TinyEncoder();
  std::string name() const override { return "tiny"; }
  int feature_dim() const override { return 64; }
  std::string checksum() const override { return checksum_; }

 protected:
  torch::Tensor forward(const torch::Tensor& batch) override;
  void verify_weights() const override;

 private:
  std::string weights_hash() const;

  std::vector<torch::Tensor> weights_, biases_;
  std::string checksum_;
};

/// TorchScript module taking (N, 3, size, size) in [-1, 1] and returning
/// (N, D). The checksum hashes the file bytes.
class ScriptedExtractor : public FeatureExtractor {
 public:
  ScriptedExtractor(const std::filesystem::path& file, int input_size = 299);
  ~ScriptedExtractor() override;
  std::string name() const override { return "scripted:" + file_.filename().string(); }
  int feature_dim() const override { return feature_dim_; }
  std::string checksum() const override { return checksum_; }

 protected:
  torch::Tensor forward(const torch::Tensor& batch) override;

 private:
  struct Impl;
  std::unique_ptr<Impl> impl_;
  std::filesystem::path file_;
  int input_size_;
  int feature_dim_ = 0;
  std::string checksum_;
};

/// "tiny" or a path to a TorchScript file.
std::unique_ptr<FeatureExtractor> make_extractor(const std::string& spec);

torch::Tensor extract_features(FeatureExtractor& e, const ImageBatch& batch);

struct GaussianStats {
  Eigen::VectorXd mu;
  Eigen::MatrixXd sigma;
  std::int64_t n = 0;
};

/// Column means and the symmetrized n-1 covariance. Requires n >= 2.
GaussianStats gaussian_stats(const Eigen::MatrixXd& features);
GaussianStats gaussian_stats(const torch::Tensor& features);

/// ||mu_a - mu_b||^2 + tr(Sa) + tr(Sb) - 2 tr((Sa^1/2 Sb Sa^1/2)^1/2), clamped at 0.
double frechet_distance(const GaussianStats& a, const GaussianStats& b);

struct FIDReport {
  std::int64_t epoch = 0;
  std::string model_tag;
  std::int64_t n_real = 0;
  std::int64_t n_fake = 0;
  int feature_dim = 0;
  std::string extractor_checksum;
  double fid = 0.0;
};

/// Seeded subset of `sample_count` reals (all when <= 0 or larger than the
/// set) against every fake.
FIDReport fid(const ImageBatch& real, const ImageBatch& fake, FeatureExtractor& e,
              std::int64_t sample_count, std::uint64_t seed);

/// Reals are loaded at the fake resolution and channel count.
FIDReport fid(const dataset::DatasetManifest& real_manifest, const ImageBatch& fake,
              FeatureExtractor& e, std::int64_t sample_count, std::uint64_t seed);

inline constexpr const char* kFidCsvHeader =
    "epoch,model_tag,n_real,n_fake,feature_dim,extractor_checksum,fid";

/// Creates the file with its header when missing.
void append_fid_csv(const std::filesystem::path& file, const FIDReport& report);
std::vector<FIDReport> read_fid_csv(const std::filesystem::path& file);

}  // namespace usgen::metrics
