#include "usgen/tbgan.hpp"

#include <algorithm>
#include <chrono>
#include <cmath>
#include <random>
#include <sstream>

namespace F = torch::nn::functional;

namespace usgen::tbgan {
namespace {

constexpr std::uint64_t kStageTag = 0x7b9au;

torch::Tensor leaky(const torch::Tensor& x) {
  return F::leaky_relu(x, F::LeakyReLUFuncOptions().negative_slope(0.2));
}

torch::nn::Conv2d conv(int in, int out, int k, bool bias = true) {
  return torch::nn::Conv2d(torch::nn::Conv2dOptions(in, out, k).padding(k / 2).bias(bias));
}

// (1, r*r, dim): first half of the channels encodes rows, second half columns.
torch::Tensor sinusoidal_position(int resolution, int dim) {
  auto pos = torch::zeros({resolution * resolution, dim});
  auto acc = pos.accessor<float, 2>();
  const int half = dim / 2;
  const int pairs = half / 2;
  for (int y = 0; y < resolution; ++y) {
    for (int x = 0; x < resolution; ++x) {
      const int token = y * resolution + x;
      for (int i = 0; i < pairs; ++i) {
        const double freq = std::pow(10000.0, -static_cast<double>(i) / std::max(pairs, 1));
        acc[token][2 * i] = static_cast<float>(std::sin(y * freq));
        acc[token][2 * i + 1] = static_cast<float>(std::cos(y * freq));
        acc[token][half + 2 * i] = static_cast<float>(std::sin(x * freq));
        acc[token][half + 2 * i + 1] = static_cast<float>(std::cos(x * freq));
      }
    }
  }
  return pos.unsqueeze(0);
}

torch::Tensor upsample2(const torch::Tensor& img) {
  return F::interpolate(img, F::InterpolateFuncOptions()
                                 .scale_factor(std::vector<double>{2.0, 2.0})
                                 .mode(torch::kBilinear)
                                 .align_corners(false));
}

int sign_of(double v) { return (v > 0.0) - (v < 0.0); }

double unit_draw(std::mt19937_64& rng) {
  return static_cast<double>(rng() >> 11) * 0x1.0p-53;
}

int int_draw(std::mt19937_64& rng, int lo, int hi) {  // inclusive
  return lo + static_cast<int>(rng() % static_cast<std::uint64_t>(hi - lo + 1));
}

torch::Tensor per_image(const std::vector<double>& values, const torch::Tensor& like) {
  return torch::tensor(values, torch::kFloat64).to(like.dtype()).view({-1, 1, 1, 1});
}

}  // namespace

// ---------------------------------------------------------------------------
// Configuration

StyleGeneratorConfig StyleGeneratorConfig::tiny(int channels) {
  StyleGeneratorConfig c;
  c.resolution = 32;
  c.channels = channels;
  c.latent_dim = 64;
  c.style_dim = 64;
  c.mapping_layers = 2;
  c.base_dim = 64;
  c.window = 8;
  c.head_dim = 32;
  c.blocks_per_stage = 1;
  c.disc_base = 32;
  return c;
}

int StyleGeneratorConfig::dim_at(int r) const {
  int dim = base_dim;
  for (int s = 64; s <= r; s *= 2) dim /= 2;
  return std::max(dim, 32);
}

std::map<std::string, std::string> StyleGeneratorConfig::echo() const {
  return {{"tbgan.resolution", std::to_string(resolution)},
          {"tbgan.channels", std::to_string(channels)},
          {"tbgan.latent_dim", std::to_string(latent_dim)},
          {"tbgan.style_dim", std::to_string(style_dim)},
          {"tbgan.mapping_layers", std::to_string(mapping_layers)},
          {"tbgan.base_dim", std::to_string(base_dim)},
          {"tbgan.window", std::to_string(window)},
          {"tbgan.head_dim", std::to_string(head_dim)},
          {"tbgan.blocks_per_stage", std::to_string(blocks_per_stage)},
          {"tbgan.disc_base", std::to_string(disc_base)}};
}

// ---------------------------------------------------------------------------
// Generator

AdaptiveNormImpl::AdaptiveNormImpl(int dim, int style_dim) : dim_(dim) {
  affine = register_module("affine", torch::nn::Linear(style_dim, 2 * dim));
  torch::NoGradGuard no_grad;
  affine->weight.normal_(0.0, 0.02);
  affine->bias.zero_();
}

torch::Tensor AdaptiveNormImpl::forward(const torch::Tensor& x, const torch::Tensor& style) {
  const auto mean = x.mean(1, true);
  const auto var = (x - mean).pow(2).mean(1, true);
  const auto normed = (x - mean) * torch::rsqrt(var + 1e-5);
  const auto params = affine(style).unsqueeze(1);
  const auto gamma = params.narrow(2, 0, dim_);
  const auto beta = params.narrow(2, dim_, dim_);
  return normed * (1.0 + gamma) + beta;
}

StyleSwinBlockImpl::StyleSwinBlockImpl(int dim, int resolution, int window, int head_dim,
                                       int style_dim)
    : dim_(dim), resolution_(resolution) {
  window_ = std::min(window, resolution);
  shift_ = resolution <= window ? 0 : window_ / 2;
  heads_ = std::max(2, dim / head_dim);
  if (heads_ % 2) ++heads_;
  if (dim % heads_ != 0) throw ConfigError("block dim must be divisible by the head count");
  norm1 = register_module("norm1", AdaptiveNorm(dim, style_dim));
  qkv = register_module("qkv", torch::nn::Linear(dim, 3 * dim));
  proj = register_module("proj", torch::nn::Linear(dim, dim));
  const int table = (2 * window_ - 1) * (2 * window_ - 1);
  bias_regular = register_parameter("bias_regular", torch::randn({table, heads_ / 2}) * 0.02);
  bias_shifted = register_parameter("bias_shifted", torch::randn({table, heads_ / 2}) * 0.02);
  norm2 = register_module("norm2", AdaptiveNorm(dim, style_dim));
  fc1 = register_module("fc1", torch::nn::Linear(dim, 4 * dim));
  fc2 = register_module("fc2", torch::nn::Linear(4 * dim, dim));
  bias_index_ = relative_position_index(window_);
}

torch::Tensor StyleSwinBlockImpl::forward(const torch::Tensor& x, const torch::Tensor& style) {
  const auto b = x.size(0);
  const int r = resolution_;
  const int half = heads_ / 2;
  const int hd = dim_ / heads_;
  const int l = window_ * window_;
  auto gather = [&](const torch::Tensor& table) {
    return table.index_select(0, bias_index_.view(-1)).view({l, l, half}).permute({2, 0, 1});
  };

  auto h = norm1(x, style);
  auto parts = qkv(h).view({b, r, r, 3, heads_, hd}).unbind(3);
  auto regular = windowed_attention(parts[0].narrow(3, 0, half), parts[1].narrow(3, 0, half),
                                    parts[2].narrow(3, 0, half), window_, 0, gather(bias_regular));
  auto shifted = windowed_attention(parts[0].narrow(3, half, half), parts[1].narrow(3, half, half),
                                    parts[2].narrow(3, half, half), window_, shift_,
                                    gather(bias_shifted));
  auto attn = torch::cat({regular, shifted}, 3).reshape({b, r * r, dim_});
  auto out = x + proj(attn);
  return out + fc2(F::gelu(fc1(norm2(out, style))));
}

StyleGeneratorImpl::StyleGeneratorImpl(StyleGeneratorConfig config) : config_(config) {
  const int res = config_.resolution;
  if (res < 4 || (res & (res - 1)) != 0) {
    throw ConfigError("generator resolution must be a power of two >= 4");
  }
  mapping = torch::nn::Sequential();
  mapping->push_back(torch::nn::Functional([](const torch::Tensor& z) {
    return z * torch::rsqrt(z.pow(2).mean(1, true) + 1e-8);
  }));
  for (int i = 0; i < config_.mapping_layers; ++i) {
    mapping->push_back(torch::nn::Linear(i == 0 ? config_.latent_dim : config_.style_dim,
                                         config_.style_dim));
    mapping->push_back(torch::nn::LeakyReLU(torch::nn::LeakyReLUOptions().negative_slope(0.2)));
  }
  register_module("mapping", mapping);
  const_input = register_parameter("const_input", torch::randn({1, 16, config_.dim_at(4)}) * 0.02);

  int prev_dim = config_.dim_at(4);
  for (int r = 4; r <= res; r *= 2) {
    Stage stage;
    stage.resolution = r;
    stage.dim = config_.dim_at(r);
    const std::string name = "stage" + std::to_string(r);
    if (r > 4) {
      stage.upsample_proj = register_module(name + "_upsample", torch::nn::Linear(prev_dim, stage.dim));
    }
    for (int i = 0; i < config_.blocks_per_stage; ++i) {
      stage.blocks.push_back(register_module(
          name + "_block" + std::to_string(i),
          StyleSwinBlock(stage.dim, r, config_.window, config_.head_dim, config_.style_dim)));
    }
    stage.to_image = register_module(name + "_to_image", torch::nn::Linear(stage.dim, config_.channels));
    stage.to_image_style =
        register_module(name + "_to_image_style", torch::nn::Linear(config_.style_dim, stage.dim));
    stage.noise_strength = register_parameter(name + "_noise_strength", torch::zeros({1}));
    stage.position = register_buffer(name + "_position", sinusoidal_position(r, stage.dim));
    prev_dim = stage.dim;
    stages_.push_back(std::move(stage));
  }
}

torch::Tensor StyleGeneratorImpl::forward(const torch::Tensor& latents, std::uint64_t noise_seed) {
  if (latents.dim() != 2 || latents.size(1) != config_.latent_dim) {
    throw ShapeError("generator expects latents (N, " + std::to_string(config_.latent_dim) +
                     "), got " + shape_str(latents));
  }
  const auto b = latents.size(0);
  const auto style = mapping->forward(latents);
  auto x = const_input.expand({b, 16, const_input.size(2)});
  torch::Tensor img;
  for (std::size_t s = 0; s < stages_.size(); ++s) {
    auto& st = stages_[s];
    const int r = st.resolution;
    if (r > 4) {
      const auto c = x.size(2);
      auto grid = x.transpose(1, 2).reshape({b, c, r / 2, r / 2});
      x = upsample2(grid).reshape({b, c, r * r}).transpose(1, 2);
      x = st.upsample_proj(x);
    }
    x = x + st.position;
    auto gen = make_generator(derive_seed(noise_seed, {s}));
    x = x + st.noise_strength * torch::randn({b, r * r, 1}, gen);
    for (auto& block : st.blocks) x = block(x, style);
    auto rgb = st.to_image(x * (1.0 + st.to_image_style(style).unsqueeze(1)));
    rgb = rgb.transpose(1, 2).reshape({b, config_.channels, r, r});
    img = img.defined() ? upsample2(img) + rgb : rgb;
  }
  return torch::tanh(img);
}

ConvDiscriminatorImpl::ConvDiscriminatorImpl(StyleGeneratorConfig config) {
  const int res = config.resolution;
  auto width = [&](int r) { return std::min(config.disc_base * (res / r), config.disc_base * 8); };
  from_image = register_module("from_image", conv(config.channels, width(res), 1));
  for (int r = res; r > 4; r /= 2) {
    const std::string name = "block" + std::to_string(r);
    conv_a_.push_back(register_module(name + "_a", conv(width(r), width(r), 3)));
    conv_b_.push_back(register_module(name + "_b", conv(width(r), width(r / 2), 3)));
    skip_.push_back(register_module(name + "_skip", conv(width(r), width(r / 2), 1, false)));
  }
  fc1 = register_module("fc1", torch::nn::Linear(width(4) * 16, width(4)));
  fc2 = register_module("fc2", torch::nn::Linear(width(4), 1));
}

torch::Tensor ConvDiscriminatorImpl::forward(const torch::Tensor& x) {
  auto h = leaky(from_image(x));
  for (std::size_t i = 0; i < conv_a_.size(); ++i) {
    auto main = F::avg_pool2d(leaky(conv_b_[i](leaky(conv_a_[i](h)))), F::AvgPool2dFuncOptions(2));
    auto skip = skip_[i](F::avg_pool2d(h, F::AvgPool2dFuncOptions(2)));
    h = (main + skip) * (1.0 / std::sqrt(2.0));
  }
  return fc2(leaky(fc1(h.flatten(1))));
}

torch::Tensor sample_latents(std::int64_t count, int latent_dim, std::uint64_t seed) {
  auto gen = make_generator(seed);
  return torch::randn({count, latent_dim}, gen);
}

ImageBatch generate(StyleGenerator& g, const torch::Tensor& latents, std::uint64_t seed) {
  return g(latents, seed);
}

// ---------------------------------------------------------------------------
// DiffAug

DiffAugPolicy DiffAugPolicy::parse(const std::string& comma_list, double translation_ratio,
                                   double cutout_ratio) {
  if (translation_ratio < 0.0 || translation_ratio > 1.0 || cutout_ratio < 0.0 || cutout_ratio > 1.0) {
    throw ConfigError("DiffAug ratios must lie in [0, 1]");
  }
  DiffAugPolicy policy;
  policy.translation_ratio = translation_ratio;
  policy.cutout_ratio = cutout_ratio;
  std::stringstream ss(comma_list);
  std::string item;
  while (std::getline(ss, item, ',')) {
    item.erase(0, item.find_first_not_of(" \t"));
    item.erase(item.find_last_not_of(" \t") + 1);
    if (item.empty() || item == "none") continue;
    if (item == "color") {
      policy.transforms.insert({"brightness", "saturation", "contrast"});
    } else if (item == "brightness" || item == "saturation" || item == "contrast" ||
               item == "translation" || item == "cutout") {
      policy.transforms.insert(item);
    } else {
      throw ConfigError("unknown DiffAug transform '" + item + "'");
    }
  }
  return policy;
}

std::string DiffAugPolicy::to_string() const {
  std::string out;
  for (const char* name : {"brightness", "saturation", "contrast", "translation", "cutout"}) {
    if (has(name)) out += (out.empty() ? "" : ",") + std::string(name);
  }
  return out.empty() ? "none" : out;
}

DiffAugParams draw_diffaug_params(const DiffAugPolicy& policy, std::int64_t count, int height,
                                  int width, std::uint64_t seed) {
  DiffAugParams p;
  const int shift_y = static_cast<int>(height * policy.translation_ratio + 0.5);
  const int shift_x = static_cast<int>(width * policy.translation_ratio + 0.5);
  p.cutout_size = std::min({static_cast<int>(height * policy.cutout_ratio + 0.5),
                            static_cast<int>(width * policy.cutout_ratio + 0.5), height, width});
  for (std::int64_t i = 0; i < count; ++i) {
    std::mt19937_64 rng(derive_seed(seed, {static_cast<std::uint64_t>(i)}));
    p.brightness.push_back(unit_draw(rng) - 0.5);
    p.saturation.push_back(unit_draw(rng) * 2.0);
    p.contrast.push_back(unit_draw(rng) + 0.5);
    p.shift_x.push_back(int_draw(rng, -shift_x, shift_x));
    p.shift_y.push_back(int_draw(rng, -shift_y, shift_y));
    p.cutout_x.push_back(int_draw(rng, 0, width - p.cutout_size));
    p.cutout_y.push_back(int_draw(rng, 0, height - p.cutout_size));
  }
  return p;
}

torch::Tensor apply_diffaug(const torch::Tensor& batch, const DiffAugPolicy& policy,
                            const DiffAugParams& params) {
  check_image_batch(batch, "diffaug");
  if (batch.size(0) == 0) throw ShapeError("diffaug: empty batch");
  if (policy.transforms.empty()) return batch;
  const auto n = batch.size(0);
  const auto h = batch.size(2), w = batch.size(3);
  if (static_cast<std::int64_t>(params.brightness.size()) != n) {
    throw ShapeError("diffaug: parameter count does not match the batch");
  }
  auto x = batch;
  if (policy.has("brightness")) x = x + per_image(params.brightness, x);
  // x*f + m*(1-f) keeps f == 1 an exact identity.
  if (policy.has("saturation")) {
    const auto f = per_image(params.saturation, x);
    x = x * f + x.mean(1, true) * (1.0 - f);
  }
  if (policy.has("contrast")) {
    const auto f = per_image(params.contrast, x);
    x = x * f + x.mean({1, 2, 3}, true) * (1.0 - f);
  }
  if (policy.has("translation")) {
    std::vector<torch::Tensor> moved;
    moved.reserve(static_cast<std::size_t>(n));
    for (std::int64_t i = 0; i < n; ++i) {
      const int dx = params.shift_x[static_cast<std::size_t>(i)];
      const int dy = params.shift_y[static_cast<std::size_t>(i)];
      auto img = x.narrow(0, i, 1);
      if (dx != 0 || dy != 0) {
        img = F::pad(img, F::PadFuncOptions({std::max(dx, 0), std::max(-dx, 0), std::max(dy, 0),
                                             std::max(-dy, 0)}));
        img = img.narrow(3, std::max(-dx, 0), w).narrow(2, std::max(-dy, 0), h);
      }
      moved.push_back(img);
    }
    x = torch::cat(moved, 0);
  }
  if (policy.has("cutout") && params.cutout_size > 0) {
    auto mask = torch::ones({n, 1, h, w}, x.options().requires_grad(false));
    for (std::int64_t i = 0; i < n; ++i) {
      mask[i].narrow(1, params.cutout_y[static_cast<std::size_t>(i)], params.cutout_size)
          .narrow(2, params.cutout_x[static_cast<std::size_t>(i)], params.cutout_size)
          .zero_();
    }
    x = x * mask;
  }
  return x;
}

torch::Tensor diffaug(const torch::Tensor& batch, const DiffAugPolicy& policy, std::uint64_t seed) {
  check_image_batch(batch, "diffaug");
  const auto params = draw_diffaug_params(policy, batch.size(0), static_cast<int>(batch.size(2)),
                                          static_cast<int>(batch.size(3)), seed);
  return apply_diffaug(batch, policy, params);
}

// ---------------------------------------------------------------------------
// APA

APAState APAState::with_speed(std::size_t batch_size, double images_to_traverse, double target,
                              double ema_decay) {
  APAState s;
  s.target = target;
  s.ema_decay = ema_decay;
  s.step_size = static_cast<double>(batch_size) / images_to_traverse;
  return s;
}

APAState apa_update(const APAState& state, const torch::Tensor& disc_logits_real) {
  if (disc_logits_real.numel() == 0) throw ShapeError("apa_update: empty logit batch");
  const auto flat = disc_logits_real.detach().to(torch::kFloat64).contiguous().view(-1);
  const double* p = flat.data_ptr<double>();
  std::int64_t balance = 0;
  for (std::int64_t i = 0; i < flat.numel(); ++i) balance += sign_of(p[i]);
  const double mean_sign = static_cast<double>(balance) / static_cast<double>(flat.numel());

  APAState next = state;
  next.lambda_r = state.lambda_r + (1.0 - state.ema_decay) * (mean_sign - state.lambda_r);
  next.p = std::clamp(state.p + state.step_size * sign_of(next.lambda_r - state.target), 0.0, 1.0);
  return next;
}

ImageBatch apa_mix(const ImageBatch& real, const ImageBatch& fake, double p, std::uint64_t seed) {
  if (real.sizes() != fake.sizes()) {
    throw ShapeError("apa_mix: real " + shape_str(real) + " vs fake " + shape_str(fake));
  }
  check_image_batch(real, "apa_mix");
  auto gen = make_generator(seed);
  const auto draws = torch::rand({real.size(0)}, gen, torch::kFloat64);
  const auto pick_fake = (draws < p).view({-1, 1, 1, 1});
  return torch::where(pick_fake, fake, real);
}

// ---------------------------------------------------------------------------
// Losses

torch::Tensor r1_penalty(const Critic& critic, const torch::Tensor& real, double gamma) {
  auto x = real.detach().clone().requires_grad_(true);
  auto logits = critic(x);
  if (!logits.requires_grad()) return torch::zeros({}, real.options());
  auto grads = torch::autograd::grad({logits.sum()}, {x}, {}, /*retain_graph=*/true,
                                     /*create_graph=*/true, /*allow_unused=*/true)[0];
  if (!grads.defined()) return torch::zeros({}, real.options());
  return 0.5 * gamma * grads.pow(2).flatten(1).sum(1).mean();
}

GanLosses gan_losses_from_fakes(const Critic& d, const torch::Tensor& fake, const ImageBatch& real,
                                const GanLossOptions& options, const APAState& apa,
                                std::int64_t step_index, std::uint64_t seed) {
  if (real.sizes() != fake.sizes()) {
    throw ShapeError("gan_losses: real " + shape_str(real) + " vs fake " + shape_str(fake));
  }
  GanLosses out;
  const auto fake_const = fake.detach();
  const auto mixed = apa_mix(real, fake_const, apa.p, derive_seed(seed, {1}));
  out.real_logits = d(diffaug(mixed, options.policy, derive_seed(seed, {2})));
  const auto fake_logits = d(diffaug(fake_const, options.policy, derive_seed(seed, {3})));
  out.d_main = 0.5 * (F::softplus(-out.real_logits).mean() + F::softplus(fake_logits).mean());
  out.d_loss = out.d_main;
  if (options.r1_gamma > 0.0 && options.r1_interval > 0 && step_index % options.r1_interval == 0) {
    out.r1 = r1_penalty(d, mixed, options.r1_gamma);
    out.d_loss = out.d_main + *out.r1;
  }
  out.g_loss = F::softplus(-d(diffaug(fake, options.policy, derive_seed(seed, {4})))).mean();
  const auto check = [&](const torch::Tensor& t, const char* what) {
    require_finite(t.item<double>(), what, step_index);
  };
  check(out.d_loss, "discriminator loss");
  check(out.g_loss, "generator loss");
  return out;
}

GanLosses gan_losses(StyleGenerator& g, ConvDiscriminator& d, const ImageBatch& real,
                     const torch::Tensor& latents, const GanLossOptions& options,
                     const APAState& apa, std::int64_t step_index, std::uint64_t seed) {
  const auto fake = g(latents, derive_seed(seed, {0}));
  return gan_losses_from_fakes([&](const torch::Tensor& x) { return d(x); }, fake, real, options,
                               apa, step_index, seed);
}

// ---------------------------------------------------------------------------
// Training

TBGanTrainer::TBGanTrainer(StyleGenerator g, ConvDiscriminator d, TBGanTrainOptions options,
                           ImageBatch data)
    : g_(std::move(g)),
      d_(std::move(d)),
      options_(std::move(options)),
      data_(std::move(data)),
      adam_g_(*g_, options_.adam_g),
      adam_d_(*d_, options_.adam_d),
      apa_(APAState::with_speed(options_.stage.batch_size, options_.apa_images, options_.apa_target,
                                options_.apa_ema)) {
  check_image_batch(data_, "TB-GAN training data");
  if (data_.size(0) == 0) throw EmptyDatasetError("TB-GAN training: no images");
  const auto& cfg = g_->config();
  if (data_.size(2) != cfg.resolution || data_.size(1) != cfg.channels) {
    throw ShapeError("TB-GAN data " + shape_str(data_) + " does not match generator resolution " +
                     std::to_string(cfg.resolution));
  }
}

TBGanEpochStats TBGanTrainer::train_epoch() {
  const auto& stage = options_.stage;
  const auto batches = unit_batches(static_cast<std::size_t>(data_.size(0)), stage, kStageTag, epoch_);
  ModelCheckpoint snapshot;
  save(snapshot, "snapshot");
  TBGanEpochStats stats;
  stats.min_p = stats.max_p = apa_.p;
  int r1_count = 0;
  const auto e = static_cast<std::uint64_t>(epoch_);
  const int latent_dim = g_->config().latent_dim;
  Critic critic = [this](const torch::Tensor& x) { return d_(x); };
  try {
    for (std::size_t b = 0; b < batches.size(); ++b) {
      const auto real = gather_batch(data_, batches[b], stage, derive_seed(stage.seed, {kStageTag, 2, e, b}));
      const auto step_seed = derive_seed(stage.seed, {kStageTag, 3, e, b});
      const auto latents = sample_latents(real.size(0), latent_dim, derive_seed(step_seed, {5}));
      const auto fake = g_(latents, derive_seed(step_seed, {0}));

      adam_d_.zero_grad();
      auto losses = gan_losses_from_fakes(critic, fake, real, options_.losses, apa_, step_, step_seed);
      losses.d_loss.backward();
      adam_d_.step();
      apa_ = apa_update(apa_, losses.real_logits);

      // Generator loss re-evaluated against the updated discriminator.
      adam_g_.zero_grad();
      auto g_loss = F::softplus(-d_(diffaug(fake, options_.losses.policy,
                                            derive_seed(step_seed, {4})))).mean();
      require_finite(g_loss.item<double>(), "generator loss", step_);
      g_loss.backward();
      adam_g_.step();

      stats.g_loss += g_loss.item<double>();
      stats.d_loss += losses.d_loss.item<double>();
      if (losses.r1) {
        stats.r1 += losses.r1->item<double>();
        ++r1_count;
      }
      stats.min_p = std::min(stats.min_p, apa_.p);
      stats.max_p = std::max(stats.max_p, apa_.p);
      ++step_;
    }
  } catch (const NumericError&) {
    load(snapshot, "snapshot");
    throw;
  }
  const double n = static_cast<double>(batches.size());
  stats.g_loss /= n;
  stats.d_loss /= n;
  stats.r1 = r1_count ? stats.r1 / r1_count : 0.0;
  stats.apa_p = apa_.p;
  stats.lambda_r = apa_.lambda_r;
  ++epoch_;
  return stats;
}

void TBGanTrainer::save(ModelCheckpoint& ckpt, const std::string& prefix) const {
  put_module(ckpt, prefix + "/g", *g_);
  put_module(ckpt, prefix + "/d", *d_);
  adam_g_.save(ckpt, prefix + "/adam_g");
  adam_d_.save(ckpt, prefix + "/adam_d");
  ckpt.extra["epochs"][prefix] = epoch_;
  ckpt.extra["steps"][prefix] = step_;
  ckpt.extra["apa"][prefix] = {{"p", apa_.p}, {"lambda_r", apa_.lambda_r}};
}

void TBGanTrainer::load(const ModelCheckpoint& ckpt, const std::string& prefix) {
  load_weights(ckpt, prefix);
  adam_g_.load(ckpt, prefix + "/adam_g");
  adam_d_.load(ckpt, prefix + "/adam_d");
  epoch_ = ckpt.extra.at("epochs").at(prefix).get<std::int64_t>();
  step_ = ckpt.extra.at("steps").at(prefix).get<std::int64_t>();
  apa_.p = ckpt.extra.at("apa").at(prefix).at("p").get<double>();
  apa_.lambda_r = ckpt.extra.at("apa").at(prefix).at("lambda_r").get<double>();
}

void TBGanTrainer::load_weights(const ModelCheckpoint& ckpt, const std::string& prefix) {
  load_module(ckpt, prefix + "/g", *g_);
  load_module(ckpt, prefix + "/d", *d_);
}

std::pair<ModelCheckpoint, TraceTable> train_tbgan(StyleGenerator g, ConvDiscriminator d,
                                                   const ImageBatch& data,
                                                   const TBGanTrainOptions& options,
                                                   const ModelCheckpoint* init,
                                                   const std::string& init_prefix) {
  const auto arch = g->config().echo();
  if (init) require_same_architecture(init->architecture, arch);
  TBGanTrainer trainer(std::move(g), std::move(d), options, data);
  if (init) trainer.load_weights(*init, init_prefix);
  TraceTable trace{TBGanTrainer::trace_columns(), {}};
  for (std::int64_t e = 0; e < options.stage.epochs; ++e) {
    const auto start = std::chrono::steady_clock::now();
    const auto s = trainer.train_epoch();
    const double wall = std::chrono::duration<double>(std::chrono::steady_clock::now() - start).count();
    trace.add({static_cast<double>(trainer.epoch()), s.g_loss, s.d_loss, s.r1, s.apa_p, s.lambda_r, wall});
  }
  ModelCheckpoint ckpt;
  ckpt.pipeline = "tbgan";
  ckpt.stage = "tbgan";
  ckpt.epoch = trainer.epoch();
  ckpt.architecture = arch;
  ckpt.rng = {options.stage.seed, trainer.epoch()};
  trainer.save(ckpt, "tbgan");
  return {std::move(ckpt), std::move(trace)};
}

std::pair<ModelCheckpoint, TraceTable> train_tbgan(StyleGenerator g, ConvDiscriminator d,
                                                   const dataset::DatasetManifest& manifest,
                                                   const TBGanTrainOptions& options,
                                                   const ModelCheckpoint* init,
                                                   const std::string& init_prefix) {
  if (manifest.count() == 0) throw EmptyDatasetError("TB-GAN training: empty manifest");
  const auto& cfg = g->config();
  return train_tbgan(std::move(g), std::move(d),
                     dataset::load_all(manifest, cfg.resolution, cfg.channels), options, init,
                     init_prefix);
}

}  // namespace usgen::tbgan
