#include "usgen/diffusion.hpp"

#include <chrono>
#include <cmath>
#include <numeric>
#include <set>

namespace F = torch::nn::functional;

namespace usgen::diffusion {
namespace {

constexpr std::uint64_t kStageTag = 0xd1ffu;

int norm_groups(int wanted, int channels) {
  for (int g = std::min(wanted, channels); g > 1; --g) {
    if (channels % g == 0) return g;
  }
  return 1;
}

std::string join(const std::vector<int>& v) {
  std::string s;
  for (std::size_t i = 0; i < v.size(); ++i) s += (i ? "," : "") + std::to_string(v[i]);
  return s;
}

void zero_init(torch::nn::Conv2d& conv) {
  torch::NoGradGuard no_grad;
  conv->weight.zero_();
  if (conv->bias.defined()) conv->bias.zero_();
}

torch::nn::Conv2d conv3(int in, int out, int stride = 1) {
  return torch::nn::Conv2d(torch::nn::Conv2dOptions(in, out, 3).stride(stride).padding(1));
}

void check_finite(const torch::Tensor& t, const std::string& what) {
  if (!torch::isfinite(t).all().item<bool>()) throw NumericError("non-finite " + what);
}

}  // namespace

DiffusionSchedule build_schedule(std::int64_t timesteps, double beta_start, double beta_end) {
  if (timesteps < 1) throw ConfigError("diffusion schedule needs T >= 1");
  if (!(beta_start > 0.0 && beta_start <= beta_end && beta_end < 1.0)) {
    throw ConfigError("diffusion schedule needs 0 < beta_start <= beta_end < 1");
  }
  DiffusionSchedule s;
  s.beta.resize(timesteps);
  s.alpha.resize(timesteps);
  s.alpha_bar.resize(timesteps);
  double running = 1.0;
  for (std::int64_t t = 0; t < timesteps; ++t) {
    const double frac = timesteps == 1 ? 0.0 : static_cast<double>(t) / (timesteps - 1);
    s.beta[t] = beta_start + (beta_end - beta_start) * frac;
    s.alpha[t] = 1.0 - s.beta[t];
    running *= s.alpha[t];
    s.alpha_bar[t] = running;
  }
  return s;
}

UNetConfig UNetConfig::tiny(int image_size, int channels) {
  UNetConfig c;
  c.image_size = image_size;
  c.channels = channels;
  c.base_channels = 16;
  c.channel_mult = {1, 2, 2};
  c.res_blocks = 1;
  c.attention_resolutions = {16};
  c.groups = 4;
  return c;
}

std::map<std::string, std::string> UNetConfig::echo() const {
  return {{"unet.image_size", std::to_string(image_size)},
          {"unet.channels", std::to_string(channels)},
          {"unet.base_channels", std::to_string(base_channels)},
          {"unet.channel_mult", join(channel_mult)},
          {"unet.res_blocks", std::to_string(res_blocks)},
          {"unet.attention_resolutions", join(attention_resolutions)},
          {"unet.groups", std::to_string(groups)}};
}

ResBlockImpl::ResBlockImpl(int in_ch, int out_ch, int time_dim, int groups) {
  norm1 = register_module("norm1", torch::nn::GroupNorm(norm_groups(groups, in_ch), in_ch));
  conv1 = register_module("conv1", conv3(in_ch, out_ch));
  time_proj = register_module("time_proj", torch::nn::Linear(time_dim, out_ch));
  norm2 = register_module("norm2", torch::nn::GroupNorm(norm_groups(groups, out_ch), out_ch));
  conv2 = register_module("conv2", conv3(out_ch, out_ch));
  zero_init(conv2);
  if (in_ch != out_ch) {
    skip = register_module("skip", torch::nn::Conv2d(torch::nn::Conv2dOptions(in_ch, out_ch, 1)));
  }
}

torch::Tensor ResBlockImpl::forward(const torch::Tensor& x, const torch::Tensor& temb) {
  auto h = conv1(F::silu(norm1(x)));
  h = h + time_proj(F::silu(temb)).unsqueeze(-1).unsqueeze(-1);
  h = conv2(F::silu(norm2(h)));
  return (skip ? skip(x) : x) + h;
}

AttentionBlockImpl::AttentionBlockImpl(int channels, int groups) {
  norm = register_module("norm", torch::nn::GroupNorm(norm_groups(groups, channels), channels));
  qkv = register_module("qkv", torch::nn::Conv2d(torch::nn::Conv2dOptions(channels, 3 * channels, 1)));
  proj = register_module("proj", torch::nn::Conv2d(torch::nn::Conv2dOptions(channels, channels, 1)));
  zero_init(proj);
}

torch::Tensor AttentionBlockImpl::forward(const torch::Tensor& x) {
  const auto n = x.size(0), c = x.size(1), h = x.size(2), w = x.size(3);
  auto parts = qkv(norm(x)).reshape({n, 3, c, h * w}).unbind(1);
  const auto& q = parts[0];
  const auto& k = parts[1];
  const auto& v = parts[2];
  auto weights = torch::softmax(torch::bmm(q.transpose(1, 2), k) / std::sqrt(static_cast<double>(c)), -1);
  auto out = torch::bmm(v, weights.transpose(1, 2)).reshape({n, c, h, w});
  return x + proj(out);
}

torch::Tensor timestep_embedding(const torch::Tensor& t, int dim) {
  const int half = dim / 2;
  auto freqs = torch::exp(-std::log(10000.0) * torch::arange(half, torch::kFloat32) / half);
  auto args = t.to(torch::kFloat32).unsqueeze(1) * freqs.unsqueeze(0);
  auto emb = torch::cat({torch::sin(args), torch::cos(args)}, 1);
  if (dim % 2) emb = F::pad(emb, F::PadFuncOptions({0, 1}));
  return emb;
}

UNetImpl::UNetImpl(UNetConfig config) : config_(std::move(config)) {
  const int base = config_.base_channels;
  const int groups = config_.groups;
  const std::set<int> attn_at(config_.attention_resolutions.begin(),
                              config_.attention_resolutions.end());
  const int levels = static_cast<int>(config_.channel_mult.size());
  if (levels < 1) throw ConfigError("unet channel_mult must not be empty");
  if (config_.image_size % (1 << (levels - 1)) != 0) {
    throw ConfigError("unet image size must be divisible by 2^(levels-1)");
  }
  time_dim_ = 4 * base;
  time1 = register_module("time1", torch::nn::Linear(base, time_dim_));
  time2 = register_module("time2", torch::nn::Linear(time_dim_, time_dim_));
  conv_in = register_module("conv_in", conv3(config_.channels, base));

  std::vector<int> skip_ch{base};
  int ch = base;
  int res = config_.image_size;
  for (int i = 0; i < levels; ++i) {
    const int out = base * config_.channel_mult[i];
    Level level;
    for (int r = 0; r < config_.res_blocks; ++r) {
      const std::string name = "down" + std::to_string(i) + "_" + std::to_string(r);
      level.blocks.push_back(register_module(name, ResBlock(ch, out, time_dim_, groups)));
      ch = out;
      level.attns.push_back(attn_at.count(res)
                                ? register_module(name + "_attn", AttentionBlock(ch, groups))
                                : AttentionBlock(nullptr));
      skip_ch.push_back(ch);
    }
    down_.push_back(std::move(level));
    if (i != levels - 1) {
      downsample_.push_back(register_module("downsample" + std::to_string(i), conv3(ch, ch, 2)));
      res /= 2;
      skip_ch.push_back(ch);
    }
  }

  mid1 = register_module("mid1", ResBlock(ch, ch, time_dim_, groups));
  mid_attn = register_module("mid_attn", AttentionBlock(ch, groups));
  mid2 = register_module("mid2", ResBlock(ch, ch, time_dim_, groups));

  for (int i = levels - 1; i >= 0; --i) {
    const int out = base * config_.channel_mult[i];
    Level level;
    for (int r = 0; r < config_.res_blocks + 1; ++r) {
      const std::string name = "up" + std::to_string(i) + "_" + std::to_string(r);
      const int in = ch + skip_ch.back();
      skip_ch.pop_back();
      level.blocks.push_back(register_module(name, ResBlock(in, out, time_dim_, groups)));
      ch = out;
      level.attns.push_back(attn_at.count(res)
                                ? register_module(name + "_attn", AttentionBlock(ch, groups))
                                : AttentionBlock(nullptr));
    }
    up_.push_back(std::move(level));
    if (i != 0) {
      upsample_.push_back(register_module("upsample" + std::to_string(i), conv3(ch, ch)));
      res *= 2;
    }
  }
  norm_out = register_module("norm_out", torch::nn::GroupNorm(norm_groups(groups, ch), ch));
  conv_out = register_module("conv_out", conv3(ch, config_.channels));
  zero_init(conv_out);
}

torch::Tensor UNetImpl::forward(const torch::Tensor& x, const torch::Tensor& t) {
  auto temb = time2(F::silu(time1(timestep_embedding(t, config_.base_channels))));
  std::vector<torch::Tensor> skips;
  auto h = conv_in(x);
  skips.push_back(h);
  for (std::size_t i = 0; i < down_.size(); ++i) {
    for (std::size_t r = 0; r < down_[i].blocks.size(); ++r) {
      h = down_[i].blocks[r](h, temb);
      if (down_[i].attns[r]) h = down_[i].attns[r](h);
      skips.push_back(h);
    }
    if (i < downsample_.size()) {
      h = downsample_[i](h);
      skips.push_back(h);
    }
  }
  h = mid2(mid_attn(mid1(h, temb)), temb);
  for (std::size_t i = 0; i < up_.size(); ++i) {
    for (std::size_t r = 0; r < up_[i].blocks.size(); ++r) {
      h = up_[i].blocks[r](torch::cat({h, skips.back()}, 1), temb);
      skips.pop_back();
      if (up_[i].attns[r]) h = up_[i].attns[r](h);
    }
    if (i < upsample_.size()) {
      h = F::interpolate(h, F::InterpolateFuncOptions()
                                .scale_factor(std::vector<double>{2.0, 2.0})
                                .mode(torch::kNearest));
      h = upsample_[i](h);
    }
  }
  return conv_out(F::silu(norm_out(h)));
}

NoiseModel as_noise_model(UNet& model) {
  return [model](const torch::Tensor& x, const torch::Tensor& t) mutable { return model(x, t); };
}

torch::Tensor q_sample_coeffs(const torch::Tensor& x0, const std::vector<double>& alpha_bar,
                              const torch::Tensor& noise) {
  if (x0.sizes() != noise.sizes()) {
    throw ShapeError("q_sample: x0 " + shape_str(x0) + " and noise " + shape_str(noise) +
                     " differ");
  }
  if (static_cast<std::int64_t>(alpha_bar.size()) != x0.size(0)) {
    throw ShapeError("q_sample: one alpha_bar per image expected");
  }
  std::vector<float> signal(alpha_bar.size()), sigma(alpha_bar.size());
  for (std::size_t i = 0; i < alpha_bar.size(); ++i) {
    signal[i] = static_cast<float>(std::sqrt(alpha_bar[i]));
    sigma[i] = static_cast<float>(std::sqrt(1.0 - alpha_bar[i]));
  }
  std::vector<std::int64_t> bshape(x0.dim(), 1);
  bshape[0] = x0.size(0);
  auto a = torch::tensor(signal).view(bshape).to(x0.dtype());
  auto b = torch::tensor(sigma).view(bshape).to(x0.dtype());
  return a * x0 + b * noise;
}

torch::Tensor q_sample(const torch::Tensor& x0, const torch::Tensor& t, const torch::Tensor& noise,
                       const DiffusionSchedule& s) {
  if (t.dim() != 1 || t.size(0) != x0.size(0)) {
    throw ShapeError("q_sample: one timestep per image expected");
  }
  const auto tc = t.to(torch::kLong).contiguous();
  std::vector<double> ab(static_cast<std::size_t>(tc.size(0)));
  for (std::int64_t i = 0; i < tc.size(0); ++i) {
    const auto ti = tc.data_ptr<std::int64_t>()[i];
    if (ti < 0 || ti >= s.steps()) {
      throw ShapeError("q_sample: timestep " + std::to_string(ti) + " outside [0, T)");
    }
    ab[static_cast<std::size_t>(i)] = s.alpha_bar[static_cast<std::size_t>(ti)];
  }
  return q_sample_coeffs(x0, ab, noise);
}

torch::Tensor denoise_loss_at(const NoiseModel& model, const torch::Tensor& x0,
                              const torch::Tensor& t, const torch::Tensor& noise,
                              const DiffusionSchedule& s, std::int64_t step) {
  const auto x_t = q_sample(x0, t, noise, s);
  const auto predicted = model(x_t, t);
  if (predicted.sizes() != noise.sizes()) {
    throw ShapeError("noise model output " + shape_str(predicted) + " != input " +
                     shape_str(noise));
  }
  if (!torch::isfinite(predicted).all().item<bool>()) {
    throw NumericError("non-finite noise prediction at step " + std::to_string(step));
  }
  return (predicted - noise).pow(2).mean();
}

torch::Tensor denoise_loss(const NoiseModel& model, const torch::Tensor& x0,
                           const DiffusionSchedule& s, std::uint64_t seed, std::int64_t step) {
  check_image_batch(x0, "denoise_loss");
  if (x0.size(0) == 0) throw ShapeError("denoise_loss: empty batch");
  auto gen = make_generator(seed);
  auto t = torch::randint(0, s.steps(), {x0.size(0)}, gen, torch::kLong);
  auto noise = torch::randn(x0.sizes(), gen, x0.options());
  return denoise_loss_at(model, x0, t, noise, s, step);
}

torch::Tensor p_sample_step_with(const NoiseModel& model, const torch::Tensor& x_t,
                                 std::int64_t t, const DiffusionSchedule& s,
                                 const torch::Tensor& z) {
  if (t < 0 || t >= s.steps()) {
    throw ShapeError("p_sample_step: timestep " + std::to_string(t) + " outside [0, T)");
  }
  const auto ti = static_cast<std::size_t>(t);
  auto tt = torch::full({x_t.size(0)}, t, torch::kLong);
  const auto eps = model(x_t, tt);
  const double coef = s.beta[ti] / std::sqrt(1.0 - s.alpha_bar[ti]);
  auto out = (x_t - coef * eps) / std::sqrt(s.alpha[ti]);
  if (t > 0) out = out + std::sqrt(s.beta[ti]) * z;
  check_finite(out, "sample at step " + std::to_string(t));
  return out;
}

torch::Tensor p_sample_step(const NoiseModel& model, const torch::Tensor& x_t, std::int64_t t,
                            const DiffusionSchedule& s, std::uint64_t seed) {
  torch::Tensor z;
  if (t > 0) {
    auto gen = make_generator(seed);
    z = torch::randn(x_t.sizes(), gen, x_t.options());
  }
  return p_sample_step_with(model, x_t, t, s, z);
}

ImageBatch sample(const NoiseModel& model, const DiffusionSchedule& s, std::int64_t count,
                  int size, int channels, std::uint64_t seed) {
  if (count < 1) throw ShapeError("sample: count must be >= 1");
  torch::NoGradGuard no_grad;
  auto gen = make_generator(derive_seed(seed, {0}));
  auto x = torch::randn({count, channels, size, size}, gen);
  for (std::int64_t t = s.steps() - 1; t >= 0; --t) {
    try {
      x = p_sample_step(model, x, t, s, derive_seed(seed, {static_cast<std::uint64_t>(t) + 1}));
    } catch (const NumericError& e) {
      throw NumericError(std::string("sampling failed at step ") + std::to_string(t) + ": " +
                         e.what());
    }
  }
  return x.clamp(-1.0, 1.0);
}

Finetuner::Finetuner(UNet model, DiffusionSchedule schedule, FinetuneOptions options,
                     ImageBatch data)
    : model_(std::move(model)),
      schedule_(std::move(schedule)),
      options_(std::move(options)),
      data_(std::move(data)),
      adam_(*model_, options_.adam) {
  check_image_batch(data_, "diffusion finetune data");
  if (data_.size(0) == 0) throw EmptyDatasetError("diffusion finetune: no images");
}

double Finetuner::train_epoch() {
  const auto& stage = options_.stage;
  const auto batches = unit_batches(static_cast<std::size_t>(data_.size(0)), stage, kStageTag, epoch_);
  ModelCheckpoint snapshot;
  save(snapshot, "snapshot");
  model_->train();
  double total = 0.0;
  const auto e = static_cast<std::uint64_t>(epoch_);
  try {
    for (std::size_t b = 0; b < batches.size(); ++b) {
      const auto x0 = gather_batch(data_, batches[b], stage, derive_seed(stage.seed, {kStageTag, 2, e, b}));
      adam_.zero_grad();
      auto loss = denoise_loss(as_noise_model(model_), x0, schedule_,
                               derive_seed(stage.seed, {kStageTag, 3, e, b}), adam_.steps() + 1);
      const double value = loss.item<double>();
      require_finite(value, "diffusion loss", adam_.steps() + 1);
      loss.backward();
      adam_.step();
      total += value;
    }
  } catch (const NumericError&) {
    load(snapshot, "snapshot");
    throw;
  }
  ++epoch_;
  return total / static_cast<double>(batches.size());
}

void Finetuner::save(ModelCheckpoint& ckpt, const std::string& prefix) const {
  put_module(ckpt, prefix + "/model", *model_);
  adam_.save(ckpt, prefix + "/adam");
  ckpt.extra["epochs"][prefix] = epoch_;
}

void Finetuner::load(const ModelCheckpoint& ckpt, const std::string& prefix) {
  load_module(ckpt, prefix + "/model", *model_);
  adam_.load(ckpt, prefix + "/adam");
  epoch_ = ckpt.extra.at("epochs").at(prefix).get<std::int64_t>();
}

std::pair<ModelCheckpoint, TraceTable> finetune(UNet model, const ImageBatch& data,
                                                const DiffusionSchedule& schedule,
                                                const FinetuneOptions& options) {
  Finetuner tuner(std::move(model), schedule, options, data);
  TraceTable trace{Finetuner::trace_columns(), {}};
  for (std::int64_t e = 0; e < options.stage.epochs; ++e) {
    const auto start = std::chrono::steady_clock::now();
    const double loss = tuner.train_epoch();
    const double wall = std::chrono::duration<double>(std::chrono::steady_clock::now() - start).count();
    trace.add({static_cast<double>(tuner.epoch()), loss, wall});
  }
  ModelCheckpoint ckpt;
  ckpt.pipeline = "dsr";
  ckpt.stage = "diffusion";
  ckpt.epoch = tuner.epoch();
  ckpt.architecture = tuner.model()->config().echo();
  ckpt.rng = {options.stage.seed, tuner.epoch()};
  tuner.save(ckpt, "diffusion");
  return {std::move(ckpt), std::move(trace)};
}

std::pair<ModelCheckpoint, TraceTable> finetune(UNet model, const dataset::DatasetManifest& manifest,
                                                const DiffusionSchedule& schedule,
                                                const FinetuneOptions& options) {
  if (manifest.count() == 0) throw EmptyDatasetError("diffusion finetune: empty manifest");
  const auto& cfg = model->config();
  return finetune(std::move(model), dataset::load_all(manifest, cfg.image_size, cfg.channels),
                  schedule, options);
}

}  // namespace usgen::diffusion
