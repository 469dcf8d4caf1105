#pragma once

#include "usgen/checkpoint.hpp"
#include "usgen/common.hpp"
#include "usgen/dataset.hpp"
#include "usgen/optim.hpp"
#include "usgen/training.hpp"

#include <functional>
#include <map>
#include <optional>
#include <string>
#include <utility>

namespace usgen::superres {

/// Maps an image batch to one realness logit per image, shape (N, 1).
using Critic = std::function<torch::Tensor(const torch::Tensor&)>;

struct SRConfig {
  int channels = 1;
  int features = 64;
  int residual_blocks = 8;
  int disc_features = 64;

  static SRConfig tiny(int channels = 1);
  std::map<std::string, std::string> echo() const;
};

/// (N, C*r*r, H, W) -> (N, C, H*r, W*r).
torch::Tensor pixel_shuffle(const torch::Tensor& x, int factor);
/// Exact inverse of pixel_shuffle.
torch::Tensor pixel_unshuffle(const torch::Tensor& x, int factor);

class SRResidualBlockImpl : public torch::nn::Module {
 public:
  explicit SRResidualBlockImpl(int features);
  torch::Tensor forward(const torch::Tensor& x);

 private:
  torch::nn::Conv2d conv1{nullptr}, conv2{nullptr};
  torch::nn::PReLU act{nullptr};
};
TORCH_MODULE(SRResidualBlock);

/// Input convolution, residual trunk with a long skip, one x2 sub-pixel
/// stage and a tanh output convolution.
class SRGeneratorImpl : public torch::nn::Module {
 public:
  explicit SRGeneratorImpl(SRConfig config);
  torch::Tensor forward(const torch::Tensor& low);
  const SRConfig& config() const { return config_; }

 private:
  SRConfig config_;
  torch::nn::Conv2d head{nullptr}, trunk_out{nullptr}, up_conv{nullptr}, tail{nullptr};
  torch::nn::PReLU head_act{nullptr}, up_act{nullptr};
  std::vector<SRResidualBlock> blocks_;
};
TORCH_MODULE(SRGenerator);

/// Strided convolutional classifier with a pooled dense head.
class SRDiscriminatorImpl : public torch::nn::Module {
 public:
  explicit SRDiscriminatorImpl(SRConfig config);
  torch::Tensor forward(const torch::Tensor& x);

 private:
  torch::nn::Sequential features{nullptr};
  torch::nn::Linear fc1{nullptr}, fc2{nullptr};
};
TORCH_MODULE(SRDiscriminator);

/// Doubles the spatial size. Throws ShapeError for non-square input.
ImageBatch sr_generate(SRGenerator& g, const ImageBatch& low);

struct SRLosses {
  torch::Tensor g_loss;
  torch::Tensor d_loss;
  torch::Tensor content;
  torch::Tensor adversarial;
};

inline constexpr double kDefaultAdversarialWeight = 1e-3;

/// Losses for a given super-resolved batch: content = pixel MSE against
/// high_real, adversarial = -log D(sr), d_loss = mean of the real and fake
/// binary cross-entropies (generated images detached).
SRLosses sr_losses_from_output(const Critic& d, const torch::Tensor& sr,
                               const torch::Tensor& high_real,
                               double lambda_adv = kDefaultAdversarialWeight);

SRLosses sr_losses(SRGenerator& g, SRDiscriminator& d, const ImageBatch& low,
                   const ImageBatch& high_real, double lambda_adv = kDefaultAdversarialWeight);

/// Antialiased bicubic x0.5, clamped to [-1, 1].
ImageBatch downsample_bicubic(const ImageBatch& high);

struct PairBatch {
  ImageBatch low;
  ImageBatch high;
};

/// Real high-resolution images with their bicubic-downsampled partners, one
/// epoch in seeded order.
class PairIterator {
 public:
  PairIterator(dataset::BatchIterator batches) : batches_(std::move(batches)) {}
  std::optional<PairBatch> next();

 private:
  dataset::BatchIterator batches_;
};

PairIterator make_pairs(const dataset::DatasetManifest& manifest, int high_size,
                        std::uint64_t seed, std::size_t batch_size = 16, int channels = 1);

struct SRTrainOptions {
  StageOptions stage;
  optim::AdamOptions adam_g{1e-4, 0.9, 0.999, 1e-8, 0.0};
  optim::AdamOptions adam_d{1e-4, 0.9, 0.999, 1e-8, 0.0};
  double lambda_adv = kDefaultAdversarialWeight;
};

struct SREpochStats {
  double g_loss = 0.0;
  double d_loss = 0.0;
  double content = 0.0;
};

/// Alternating discriminator/generator Adam steps over real pairs.
class SRTrainer {
 public:
  SRTrainer(SRGenerator g, SRDiscriminator d, SRTrainOptions options, ImageBatch high_data);

  SREpochStats train_epoch();

  std::int64_t epoch() const { return epoch_; }
  SRGenerator& generator() { return g_; }
  SRDiscriminator& discriminator() { return d_; }

  void save(ModelCheckpoint& ckpt, const std::string& prefix) const;
  void load(const ModelCheckpoint& ckpt, const std::string& prefix);

  static std::vector<std::string> trace_columns() {
    return {"epoch", "g_loss", "d_loss", "content_loss", "wall_time_s"};
  }

 private:
  SRGenerator g_;
  SRDiscriminator d_;
  SRTrainOptions options_;
  ImageBatch data_;
  optim::Adam adam_g_, adam_d_;
  std::int64_t epoch_ = 0;
};

/// From-scratch training; trace columns `epoch,g_loss,d_loss,content_loss,wall_time_s`.
std::pair<ModelCheckpoint, TraceTable> train_srgan(SRGenerator g, SRDiscriminator d,
                                                   const ImageBatch& high_data,
                                                   const SRTrainOptions& options);

std::pair<ModelCheckpoint, TraceTable> train_srgan(SRGenerator g, SRDiscriminator d,
                                                   const dataset::DatasetManifest& manifest,
                                                   int high_size, const SRTrainOptions& options);

}  // namespace usgen::superres
