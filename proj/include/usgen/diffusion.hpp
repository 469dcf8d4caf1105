#pragma once

#include "usgen/checkpoint.hpp"
#include "usgen/common.hpp"
#include "usgen/dataset.hpp"
#include "usgen/optim.hpp"
#include "usgen/training.hpp"

#include <functional>
#include <map>
#include <string>
#include <utility>
#include <vector>

namespace usgen::diffusion {

/// Per-timestep coefficients, indexed 0..T-1.
struct DiffusionSchedule {
  std::vector<double> beta;
  std::vector<double> alpha;      // 1 - beta
  std::vector<double> alpha_bar;  // running product of alpha

  std::int64_t steps() const { return static_cast<std::int64_t>(beta.size()); }
};

/// Linear beta ramp. Throws ConfigError unless T >= 1 and
/// 0 < beta_start <= beta_end < 1.
DiffusionSchedule build_schedule(std::int64_t timesteps, double beta_start, double beta_end);

/// Predicts the noise added to x_t at integer timesteps t (one per image).
using NoiseModel = std::function<torch::Tensor(const torch::Tensor& x_t, const torch::Tensor& t)>;

struct UNetConfig {
  int image_size = 128;
  int channels = 1;
  int base_channels = 64;
  std::vector<int> channel_mult{1, 1, 2, 2, 4};
  int res_blocks = 2;
  std::vector<int> attention_resolutions{16};
  int groups = 32;

  static UNetConfig tiny(int image_size = 32, int channels = 1);
  std::map<std::string, std::string> echo() const;
};

class ResBlockImpl : public torch::nn::Module {
 public:
  ResBlockImpl(int in_ch, int out_ch, int time_dim, int groups);
  torch::Tensor forward(const torch::Tensor& x, const torch::Tensor& temb);

 private:
  torch::nn::GroupNorm norm1{nullptr}, norm2{nullptr};
  torch::nn::Conv2d conv1{nullptr}, conv2{nullptr}, skip{nullptr};
  torch::nn::Linear time_proj{nullptr};
};
TORCH_MODULE(ResBlock);

class AttentionBlockImpl : public torch::nn::Module {
 public:
  AttentionBlockImpl(int channels, int groups);
  torch::Tensor forward(const torch::Tensor& x);

 private:
  torch::nn::GroupNorm norm{nullptr};
  torch::nn::Conv2d qkv{nullptr}, proj{nullptr};
};
TORCH_MODULE(AttentionBlock);

/// Sinusoidal embedding of integer timesteps, shape (N, dim).
torch::Tensor timestep_embedding(const torch::Tensor& t, int dim);

/// Residual U-Net noise predictor with group norm, sinusoidal time
/// embedding and self-attention at the configured resolutions.
class UNetImpl : public torch::nn::Module {
 public:
  explicit UNetImpl(UNetConfig config);
  torch::Tensor forward(const torch::Tensor& x, const torch::Tensor& t);
  const UNetConfig& config() const { return config_; }

 private:
  struct Level {
    std::vector<ResBlock> blocks;
    std::vector<AttentionBlock> attns;  // null entries where no attention
  };

  UNetConfig config_;
  int time_dim_;
  torch::nn::Linear time1{nullptr}, time2{nullptr};
  torch::nn::Conv2d conv_in{nullptr}, conv_out{nullptr};
  torch::nn::GroupNorm norm_out{nullptr};
  std::vector<Level> down_;
  std::vector<torch::nn::Conv2d> downsample_;
  ResBlock mid1{nullptr}, mid2{nullptr};
  AttentionBlock mid_attn{nullptr};
  std::vector<Level> up_;
  std::vector<torch::nn::Conv2d> upsample_;
};
TORCH_MODULE(UNet);

NoiseModel as_noise_model(UNet& model);

/// sqrt(alpha_bar)*x0 + sqrt(1 - alpha_bar)*noise with one alpha_bar per image.
torch::Tensor q_sample_coeffs(const torch::Tensor& x0, const std::vector<double>& alpha_bar,
                              const torch::Tensor& noise);

/// Closed-form forward noising at timesteps `t` (LongTensor, one per image).
torch::Tensor q_sample(const torch::Tensor& x0, const torch::Tensor& t,
                       const torch::Tensor& noise, const DiffusionSchedule& s);

/// Mean squared error between model(q_sample(x0, t, noise), t) and noise.
torch::Tensor denoise_loss_at(const NoiseModel& model, const torch::Tensor& x0,
                              const torch::Tensor& t, const torch::Tensor& noise,
                              const DiffusionSchedule& s, std::int64_t step = -1);

/// Draws t ~ U{0..T-1} per image and noise ~ N(0, I) from `seed`.
torch::Tensor denoise_loss(const NoiseModel& model, const torch::Tensor& x0,
                           const DiffusionSchedule& s, std::uint64_t seed,
                           std::int64_t step = -1);

/// One ancestral step x_t -> x_{t-1} with explicit noise `z` (ignored at t=0).
torch::Tensor p_sample_step_with(const NoiseModel& model, const torch::Tensor& x_t,
                                 std::int64_t t, const DiffusionSchedule& s,
                                 const torch::Tensor& z);

/// Same, with z ~ N(0, I) drawn from `seed` for t > 0.
torch::Tensor p_sample_step(const NoiseModel& model, const torch::Tensor& x_t, std::int64_t t,
                            const DiffusionSchedule& s, std::uint64_t seed);

/// Full reverse chain from seeded Gaussian noise; clamped to [-1, 1].
ImageBatch sample(const NoiseModel& model, const DiffusionSchedule& s, std::int64_t count,
                  int size, int channels, std::uint64_t seed);

struct FinetuneOptions {
  StageOptions stage;
  optim::AdamOptions adam{1e-4, 0.9, 0.999, 1e-8, 1.0};
};

/// Owns the optimizer state for one diffusion training stage. Every random
/// draw is derived from (seed, epoch, batch), so save/load of the weights,
/// moments and epoch counter resumes bit-exactly.
class Finetuner {
 public:
  Finetuner(UNet model, DiffusionSchedule schedule, FinetuneOptions options, ImageBatch data);

  /// Runs one unit of training and returns the mean loss over its batches.
  double train_epoch();

  std::int64_t epoch() const { return epoch_; }
  UNet& model() { return model_; }
  const DiffusionSchedule& schedule() const { return schedule_; }

  void save(ModelCheckpoint& ckpt, const std::string& prefix) const;
  void load(const ModelCheckpoint& ckpt, const std::string& prefix);

  static std::vector<std::string> trace_columns() { return {"epoch", "mean_loss", "wall_time_s"}; }

 private:
  UNet model_;
  DiffusionSchedule schedule_;
  FinetuneOptions options_;
  ImageBatch data_;
  optim::Adam adam_;
  std::int64_t epoch_ = 0;
};

/// Runs options.stage.epochs units and returns the final state and the
/// trace (`epoch,mean_loss,wall_time_s`). A non-finite loss aborts with
/// NumericError; the model keeps the weights of the last finite epoch.
std::pair<ModelCheckpoint, TraceTable> finetune(UNet model, const dataset::DatasetManifest& manifest,
                                                const DiffusionSchedule& schedule,
                                                const FinetuneOptions& options);

std::pair<ModelCheckpoint, TraceTable> finetune(UNet model, const ImageBatch& data,
                                                const DiffusionSchedule& schedule,
                                                const FinetuneOptions& options);

}  // namespace usgen::diffusion
