#pragma once

#include "usgen/checkpoint.hpp"
#include "usgen/common.hpp"
#include "usgen/dataset.hpp"
#include "usgen/optim.hpp"
#include "usgen/training.hpp"

#include <functional>
#include <map>
#include <optional>
#include <set>
#include <string>
#include <vector>

namespace usgen::tbgan {

// ---------------------------------------------------------------------------
// Window attention

/// Multi-head attention restricted to non-overlapping window x window
/// tiles of a (B, H, W, heads, head_dim) query/key/value layout. With
/// shift > 0 the grid is cyclically rolled by -shift first and masked so
/// tokens only attend within their original region; the result is rolled
/// back. `bias`, when defined, is added to the logits as (heads, L, L)
/// with L = window^2. `weights_out` receives (B*nW, heads, L, L).
torch::Tensor windowed_attention(const torch::Tensor& q, const torch::Tensor& k,
                                 const torch::Tensor& v, int window, int shift,
                                 const torch::Tensor& bias = {},
                                 torch::Tensor* weights_out = nullptr);

/// (L, L) indices into a ((2w-1)^2, heads) relative-position table.
torch::Tensor relative_position_index(int window);

/// Additive mask (nW, L, L) for shifted windows: 0 within a region,
/// a large negative value across regions.
torch::Tensor shifted_window_mask(int height, int width, int window, int shift);

class WindowAttentionImpl : public torch::nn::Module {
 public:
  WindowAttentionImpl(int dim, int heads, int window);

  /// features: (B, H, W, dim). H and W must be multiples of the window and
  /// 0 <= shift < window.
  torch::Tensor forward(const torch::Tensor& features, int shift);
  torch::Tensor attention_weights(const torch::Tensor& features, int shift);

  /// (heads, L, L) gathered from the learnable relative-position table.
  torch::Tensor relative_bias() const;

  int heads() const { return heads_; }
  int window() const { return window_; }

  torch::nn::Linear qkv{nullptr}, proj{nullptr};
  torch::Tensor bias_table;

 private:
  torch::Tensor run(const torch::Tensor& features, int shift, torch::Tensor* weights);

  int dim_, heads_, window_;
  torch::Tensor bias_index_;
};
TORCH_MODULE(WindowAttention);

torch::Tensor window_attention(WindowAttention& attn, const torch::Tensor& features, int window,
                               int shift);

// ---------------------------------------------------------------------------
// Generator and discriminator

struct StyleGeneratorConfig {
  int resolution = 256;
  int channels = 1;
  int latent_dim = 512;
  int style_dim = 512;
  int mapping_layers = 8;
  int base_dim = 256;
  int window = 8;
  int head_dim = 32;
  int blocks_per_stage = 2;
  int disc_base = 64;

  static StyleGeneratorConfig tiny(int channels = 1);
  /// Token width at a stage resolution: base_dim up to 32 px, halved per
  /// doubling beyond, floored at 32.
  int dim_at(int resolution) const;
  std::map<std::string, std::string> echo() const;
};

/// Instance normalisation over tokens followed by a style-driven affine.
class AdaptiveNormImpl : public torch::nn::Module {
 public:
  AdaptiveNormImpl(int dim, int style_dim);
  torch::Tensor forward(const torch::Tensor& x, const torch::Tensor& style);

 private:
  torch::nn::Linear affine{nullptr};
  int dim_;
};
TORCH_MODULE(AdaptiveNorm);

/// Style-modulated transformer block. Half of the heads attend within
/// regular windows, the other half within windows shifted by window/2.
class StyleSwinBlockImpl : public torch::nn::Module {
 public:
  StyleSwinBlockImpl(int dim, int resolution, int window, int head_dim, int style_dim);
  torch::Tensor forward(const torch::Tensor& x, const torch::Tensor& style);

 private:
  int dim_, resolution_, window_, shift_, heads_;
  AdaptiveNorm norm1{nullptr}, norm2{nullptr};
  torch::nn::Linear qkv{nullptr}, proj{nullptr}, fc1{nullptr}, fc2{nullptr};
  torch::Tensor bias_regular, bias_shifted;
  torch::Tensor bias_index_;
};
TORCH_MODULE(StyleSwinBlock);

class StyleGeneratorImpl : public torch::nn::Module {
 public:
  explicit StyleGeneratorImpl(StyleGeneratorConfig config);

  /// latents: (N, latent_dim). `noise_seed` drives the per-stage noise.
  torch::Tensor forward(const torch::Tensor& latents, std::uint64_t noise_seed);
  const StyleGeneratorConfig& config() const { return config_; }

 private:
  struct Stage {
    int resolution;
    int dim;
    torch::nn::Linear upsample_proj{nullptr};
    std::vector<StyleSwinBlock> blocks;
    torch::nn::Linear to_image{nullptr};
    torch::nn::Linear to_image_style{nullptr};
    torch::Tensor noise_strength;
    torch::Tensor position;  // (1, L, dim) sinusoidal encoding
  };

  StyleGeneratorConfig config_;
  torch::nn::Sequential mapping{nullptr};
  torch::Tensor const_input;
  std::vector<Stage> stages_;
};
TORCH_MODULE(StyleGenerator);

/// Residual strided-convolution discriminator, one logit per image.
class ConvDiscriminatorImpl : public torch::nn::Module {
 public:
  explicit ConvDiscriminatorImpl(StyleGeneratorConfig config);
  torch::Tensor forward(const torch::Tensor& x);

 private:
  torch::nn::Conv2d from_image{nullptr};
  std::vector<torch::nn::Conv2d> conv_a_, conv_b_, skip_;
  torch::nn::Linear fc1{nullptr}, fc2{nullptr};
};
TORCH_MODULE(ConvDiscriminator);

/// Seeded standard-normal latents, shape (count, latent_dim).
torch::Tensor sample_latents(std::int64_t count, int latent_dim, std::uint64_t seed);

/// Images in [-1, 1] at the configured resolution.
ImageBatch generate(StyleGenerator& g, const torch::Tensor& latents, std::uint64_t seed);

// ---------------------------------------------------------------------------
// DiffAug

struct DiffAugPolicy {
  std::set<std::string> transforms;  // brightness, saturation, contrast, translation, cutout
  double translation_ratio = 0.125;
  double cutout_ratio = 0.5;

  /// Accepts "color" as shorthand for the three colour transforms.
  static DiffAugPolicy parse(const std::string& comma_list, double translation_ratio = 0.125,
                             double cutout_ratio = 0.5);
  static DiffAugPolicy defaults() { return parse("color,translation,cutout"); }
  bool has(const std::string& name) const { return transforms.count(name) > 0; }
  std::string to_string() const;
};

/// Concrete per-image draws for one application of a policy.
struct DiffAugParams {
  std::vector<double> brightness;  // additive shift, U[-0.5, 0.5)
  std::vector<double> saturation;  // factor, U[0, 2)
  std::vector<double> contrast;    // factor, U[0.5, 1.5)
  std::vector<int> shift_x, shift_y;
  std::vector<int> cutout_x, cutout_y;  // top-left corner
  int cutout_size = 0;
};

DiffAugParams draw_diffaug_params(const DiffAugPolicy& policy, std::int64_t count, int height,
                                  int width, std::uint64_t seed);

/// Colour, then translation (zero fill), then cutout, in that order.
/// Built from differentiable tensor ops; works for any floating dtype.
torch::Tensor apply_diffaug(const torch::Tensor& batch, const DiffAugPolicy& policy,
                            const DiffAugParams& params);

torch::Tensor diffaug(const torch::Tensor& batch, const DiffAugPolicy& policy, std::uint64_t seed);

// ---------------------------------------------------------------------------
// Adaptive pseudo augmentation

struct APAState {
  double p = 0.0;
  double lambda_r = 0.0;
  double target = 0.6;
  double step_size = 0.0;
  double ema_decay = 0.99;

  /// Step size that lets p traverse [0, 1] after `images_to_traverse`
  /// real images shown, updating once per batch.
  static APAState with_speed(std::size_t batch_size, double images_to_traverse = 500000.0,
                             double target = 0.6, double ema_decay = 0.99);
};

/// lambda_r <- EMA of mean(sign(logits)); p <- clamp(p + step * sign(lambda_r - target)).
APAState apa_update(const APAState& state, const torch::Tensor& disc_logits_real);

/// Replaces each real image by the matching fake with probability p.
ImageBatch apa_mix(const ImageBatch& real, const ImageBatch& fake, double p, std::uint64_t seed);

// ---------------------------------------------------------------------------
// Losses and training

using Critic = std::function<torch::Tensor(const torch::Tensor&)>;

/// (gamma / 2) * mean over the batch of ||d critic(x) / dx||^2, with a graph
/// so it can be minimised.
torch::Tensor r1_penalty(const Critic& critic, const torch::Tensor& real, double gamma);

struct GanLosses {
  torch::Tensor g_loss;
  torch::Tensor d_loss;  // main term plus r1 when present
  torch::Tensor d_main;
  std::optional<torch::Tensor> r1;
  torch::Tensor real_logits;  // on the APA-mixed, augmented real side
};

struct GanLossOptions {
  DiffAugPolicy policy = DiffAugPolicy::defaults();
  double r1_gamma = 10.0;
  int r1_interval = 16;
};

/// Non-saturating logistic losses. The real side is apa_mix(real, fake, p)
/// and both discriminator inputs pass through DiffAug. R1 is added on steps
/// where step_index % r1_interval == 0.
GanLosses gan_losses_from_fakes(const Critic& d, const torch::Tensor& fake, const ImageBatch& real,
                                const GanLossOptions& options, const APAState& apa,
                                std::int64_t step_index, std::uint64_t seed);

GanLosses gan_losses(StyleGenerator& g, ConvDiscriminator& d, const ImageBatch& real,
                     const torch::Tensor& latents, const GanLossOptions& options,
                     const APAState& apa, std::int64_t step_index, std::uint64_t seed);

struct TBGanTrainOptions {
  StageOptions stage;
  optim::AdamOptions adam_g{1e-5, 0.0, 0.99, 1e-8, 0.0};
  optim::AdamOptions adam_d{1e-4, 0.0, 0.99, 1e-8, 0.0};
  GanLossOptions losses;
  double apa_target = 0.6;
  double apa_images = 500000.0;
  double apa_ema = 0.99;
};

struct TBGanEpochStats {
  double g_loss = 0.0;
  double d_loss = 0.0;
  double r1 = 0.0;
  double apa_p = 0.0;
  double lambda_r = 0.0;
  double min_p = 0.0;
  double max_p = 0.0;
};

class TBGanTrainer {
 public:
  TBGanTrainer(StyleGenerator g, ConvDiscriminator d, TBGanTrainOptions options, ImageBatch data);

  TBGanEpochStats train_epoch();

  std::int64_t epoch() const { return epoch_; }
  const APAState& apa() const { return apa_; }
  StyleGenerator& generator() { return g_; }
  ConvDiscriminator& discriminator() { return d_; }

  void save(ModelCheckpoint& ckpt, const std::string& prefix) const;
  void load(const ModelCheckpoint& ckpt, const std::string& prefix);
  /// Weights only; optimizer moments and counters stay fresh.
  void load_weights(const ModelCheckpoint& ckpt, const std::string& prefix);

  static std::vector<std::string> trace_columns() {
    return {"epoch", "g_loss", "d_loss", "r1", "apa_p", "lambda_r", "wall_time_s"};
  }

 private:
  StyleGenerator g_;
  ConvDiscriminator d_;
  TBGanTrainOptions options_;
  ImageBatch data_;
  optim::Adam adam_g_, adam_d_;
  APAState apa_;
  std::int64_t epoch_ = 0;
  std::int64_t step_ = 0;
};

/// TTUR Adam training. With `init` the generator and discriminator weights
/// are loaded from `init_prefix` after an architecture check, optimizers
/// start fresh. Trace columns `epoch,g_loss,d_loss,r1,apa_p,lambda_r,wall_time_s`.
std::pair<ModelCheckpoint, TraceTable> train_tbgan(StyleGenerator g, ConvDiscriminator d,
                                                   const ImageBatch& data,
                                                   const TBGanTrainOptions& options,
                                                   const ModelCheckpoint* init = nullptr,
                                                   const std::string& init_prefix = "tbgan");

std::pair<ModelCheckpoint, TraceTable> train_tbgan(StyleGenerator g, ConvDiscriminator d,
                                                   const dataset::DatasetManifest& manifest,
                                                   const TBGanTrainOptions& options,
                                                   const ModelCheckpoint* init = nullptr,
                                                   const std::string& init_prefix = "tbgan");

}  // namespace usgen::tbgan
