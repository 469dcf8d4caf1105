#include "usgen/superres.hpp"

#include <chrono>

namespace F = torch::nn::functional;

namespace usgen::superres {
namespace {

constexpr std::uint64_t kStageTag = 0x5e5eu;

torch::nn::Conv2d conv(int in, int out, int k, int stride = 1) {
  return torch::nn::Conv2d(torch::nn::Conv2dOptions(in, out, k).stride(stride).padding(k / 2));
}

torch::Tensor bce_with_logits(const torch::Tensor& logits, bool real) {
  // -log sigmoid(x) for real targets, -log(1 - sigmoid(x)) for fake ones.
  return real ? F::softplus(-logits).mean() : F::softplus(logits).mean();
}

}  // namespace

SRConfig SRConfig::tiny(int channels) {
  SRConfig c;
  c.channels = channels;
  c.features = 16;
  c.residual_blocks = 2;
  c.disc_features = 16;
  return c;
}

std::map<std::string, std::string> SRConfig::echo() const {
  return {{"sr.channels", std::to_string(channels)},
          {"sr.features", std::to_string(features)},
          {"sr.residual_blocks", std::to_string(residual_blocks)},
          {"sr.disc_features", std::to_string(disc_features)}};
}

torch::Tensor pixel_shuffle(const torch::Tensor& x, int factor) {
  const auto n = x.size(0), c = x.size(1), h = x.size(2), w = x.size(3);
  const std::int64_t r = factor;
  if (c % (r * r) != 0) throw ShapeError("pixel_shuffle: channels not divisible by factor^2");
  const auto oc = c / (r * r);
  return x.reshape({n, oc, r, r, h, w}).permute({0, 1, 4, 2, 5, 3}).reshape({n, oc, h * r, w * r});
}

torch::Tensor pixel_unshuffle(const torch::Tensor& x, int factor) {
  const auto n = x.size(0), c = x.size(1), h = x.size(2), w = x.size(3);
  const std::int64_t r = factor;
  if (h % r != 0 || w % r != 0) throw ShapeError("pixel_unshuffle: size not divisible by factor");
  return x.reshape({n, c, h / r, r, w / r, r}).permute({0, 1, 3, 5, 2, 4}).reshape(
      {n, c * r * r, h / r, w / r});
}

SRResidualBlockImpl::SRResidualBlockImpl(int features) {
  conv1 = register_module("conv1", conv(features, features, 3));
  act = register_module("act", torch::nn::PReLU());
  conv2 = register_module("conv2", conv(features, features, 3));
}

torch::Tensor SRResidualBlockImpl::forward(const torch::Tensor& x) {
  return x + conv2(act(conv1(x)));
}

SRGeneratorImpl::SRGeneratorImpl(SRConfig config) : config_(config) {
  const int f = config_.features;
  head = register_module("head", conv(config_.channels, f, 9));
  head_act = register_module("head_act", torch::nn::PReLU());
  for (int i = 0; i < config_.residual_blocks; ++i) {
    blocks_.push_back(register_module("block" + std::to_string(i), SRResidualBlock(f)));
  }
  trunk_out = register_module("trunk_out", conv(f, f, 3));
  up_conv = register_module("up_conv", conv(f, 4 * f, 3));
  up_act = register_module("up_act", torch::nn::PReLU());
  tail = register_module("tail", conv(f, config_.channels, 9));
}

torch::Tensor SRGeneratorImpl::forward(const torch::Tensor& low) {
  auto head_out = head_act(head(low));
  auto h = head_out;
  for (auto& block : blocks_) h = block(h);
  h = trunk_out(h) + head_out;
  h = up_act(pixel_shuffle(up_conv(h), 2));
  return torch::tanh(tail(h));
}

SRDiscriminatorImpl::SRDiscriminatorImpl(SRConfig config) {
  const int f = config.disc_features;
  auto lrelu = [] { return torch::nn::LeakyReLU(torch::nn::LeakyReLUOptions().negative_slope(0.2)); };
  features = register_module(
      "features",
      torch::nn::Sequential(conv(config.channels, f, 3), lrelu(), conv(f, f, 3, 2), lrelu(),
                            conv(f, 2 * f, 3), lrelu(), conv(2 * f, 2 * f, 3, 2), lrelu(),
                            conv(2 * f, 4 * f, 3), lrelu(), conv(4 * f, 4 * f, 3, 2), lrelu(),
                            torch::nn::AdaptiveAvgPool2d(torch::nn::AdaptiveAvgPool2dOptions(1))));
  fc1 = register_module("fc1", torch::nn::Linear(4 * f, 8 * f));
  fc2 = register_module("fc2", torch::nn::Linear(8 * f, 1));
}

torch::Tensor SRDiscriminatorImpl::forward(const torch::Tensor& x) {
  auto h = features->forward(x).flatten(1);
  return fc2(F::leaky_relu(fc1(h), F::LeakyReLUFuncOptions().negative_slope(0.2)));
}

ImageBatch sr_generate(SRGenerator& g, const ImageBatch& low) {
  check_image_batch(low, "sr_generate");
  if (low.size(2) != low.size(3)) {
    throw ShapeError("sr_generate: input must be square, got " + shape_str(low));
  }
  if (low.size(1) != g->config().channels) {
    throw ShapeError("sr_generate: channel count does not match the generator");
  }
  return g(low);
}

SRLosses sr_losses_from_output(const Critic& d, const torch::Tensor& sr,
                               const torch::Tensor& high_real, double lambda_adv) {
  if (sr.sizes() != high_real.sizes()) {
    throw ShapeError("sr_losses: generated " + shape_str(sr) + " vs real " + shape_str(high_real));
  }
  SRLosses out;
  out.content = F::mse_loss(sr, high_real);
  out.adversarial = bce_with_logits(d(sr), true);
  out.g_loss = out.content + lambda_adv * out.adversarial;
  out.d_loss = 0.5 * (bce_with_logits(d(high_real), true) + bce_with_logits(d(sr.detach()), false));
  return out;
}

SRLosses sr_losses(SRGenerator& g, SRDiscriminator& d, const ImageBatch& low,
                   const ImageBatch& high_real, double lambda_adv) {
  check_image_batch(high_real, "sr_losses");
  if (high_real.size(2) != 2 * low.size(2) || high_real.size(3) != 2 * low.size(3)) {
    throw ShapeError("sr_losses: high " + shape_str(high_real) + " is not twice low " +
                     shape_str(low));
  }
  auto sr = sr_generate(g, low);
  return sr_losses_from_output([&](const torch::Tensor& x) { return d(x); }, sr, high_real,
                               lambda_adv);
}

ImageBatch downsample_bicubic(const ImageBatch& high) {
  check_image_batch(high, "downsample_bicubic");
  if (high.size(2) % 2 || high.size(3) % 2) {
    throw ShapeError("downsample_bicubic: size must be even");
  }
  torch::NoGradGuard no_grad;
  return F::interpolate(high, F::InterpolateFuncOptions()
                                  .size(std::vector<std::int64_t>{high.size(2) / 2, high.size(3) / 2})
                                  .mode(torch::kBicubic)
                                  .align_corners(false)
                                  .antialias(true))
      .clamp(-1.0, 1.0);
}

std::optional<PairBatch> PairIterator::next() {
  auto batch = batches_.next();
  if (!batch) return std::nullopt;
  return PairBatch{downsample_bicubic(batch->images), batch->images};
}

PairIterator make_pairs(const dataset::DatasetManifest& manifest, int high_size,
                        std::uint64_t seed, std::size_t batch_size, int channels) {
  if (high_size % 2 != 0) throw ShapeError("make_pairs: high size must be even");
  return PairIterator(dataset::make_batches(manifest, batch_size, high_size, channels, seed));
}

SRTrainer::SRTrainer(SRGenerator g, SRDiscriminator d, SRTrainOptions options, ImageBatch high_data)
    : g_(std::move(g)),
      d_(std::move(d)),
      options_(std::move(options)),
      data_(std::move(high_data)),
      adam_g_(*g_, options_.adam_g),
      adam_d_(*d_, options_.adam_d) {
  check_image_batch(data_, "SR training data");
  if (data_.size(0) == 0) throw EmptyDatasetError("SR training: no images");
}

SREpochStats SRTrainer::train_epoch() {
  const auto& stage = options_.stage;
  const auto batches = unit_batches(static_cast<std::size_t>(data_.size(0)), stage, kStageTag, epoch_);
  ModelCheckpoint snapshot;
  save(snapshot, "snapshot");
  SREpochStats stats;
  const auto e = static_cast<std::uint64_t>(epoch_);
  Critic critic = [this](const torch::Tensor& x) { return d_(x); };
  try {
    for (std::size_t b = 0; b < batches.size(); ++b) {
      const auto high = gather_batch(data_, batches[b], stage, derive_seed(stage.seed, {kStageTag, 2, e, b}));
      const auto low = downsample_bicubic(high);
      const auto step = adam_g_.steps() + 1;

      auto sr = sr_generate(g_, low);
      adam_d_.zero_grad();
      auto d_loss = 0.5 * (F::softplus(-d_(high)).mean() + F::softplus(d_(sr.detach())).mean());
      require_finite(d_loss.item<double>(), "SR discriminator loss", step);
      d_loss.backward();
      adam_d_.step();

      adam_g_.zero_grad();
      auto losses = sr_losses_from_output(critic, sr, high, options_.lambda_adv);
      require_finite(losses.g_loss.item<double>(), "SR generator loss", step);
      losses.g_loss.backward();
      adam_g_.step();

      stats.g_loss += losses.g_loss.item<double>();
      stats.d_loss += d_loss.item<double>();
      stats.content += losses.content.item<double>();
    }
  } catch (const NumericError&) {
    load(snapshot, "snapshot");
    throw;
  }
  const double n = static_cast<double>(batches.size());
  stats.g_loss /= n;
  stats.d_loss /= n;
  stats.content /= n;
  ++epoch_;
  return stats;
}

void SRTrainer::save(ModelCheckpoint& ckpt, const std::string& prefix) const {
  put_module(ckpt, prefix + "/g", *g_);
  put_module(ckpt, prefix + "/d", *d_);
  adam_g_.save(ckpt, prefix + "/adam_g");
  adam_d_.save(ckpt, prefix + "/adam_d");
  ckpt.extra["epochs"][prefix] = epoch_;
}

void SRTrainer::load(const ModelCheckpoint& ckpt, const std::string& prefix) {
  load_module(ckpt, prefix + "/g", *g_);
  load_module(ckpt, prefix + "/d", *d_);
  adam_g_.load(ckpt, prefix + "/adam_g");
  adam_d_.load(ckpt, prefix + "/adam_d");
  epoch_ = ckpt.extra.at("epochs").at(prefix).get<std::int64_t>();
}

std::pair<ModelCheckpoint, TraceTable> train_srgan(SRGenerator g, SRDiscriminator d,
                                                   const ImageBatch& high_data,
                                                   const SRTrainOptions& options) {
  SRTrainer trainer(std::move(g), std::move(d), options, high_data);
  TraceTable trace{SRTrainer::trace_columns(), {}};
  for (std::int64_t e = 0; e < options.stage.epochs; ++e) {
    const auto start = std::chrono::steady_clock::now();
    const auto s = trainer.train_epoch();
    const double wall = std::chrono::duration<double>(std::chrono::steady_clock::now() - start).count();
    trace.add({static_cast<double>(trainer.epoch()), s.g_loss, s.d_loss, s.content, wall});
  }
  ModelCheckpoint ckpt;
  ckpt.pipeline = "dsr";
  ckpt.stage = "srgan";
  ckpt.epoch = trainer.epoch();
  ckpt.architecture = trainer.generator()->config().echo();
  ckpt.rng = {options.stage.seed, trainer.epoch()};
  trainer.save(ckpt, "srgan");
  return {std::move(ckpt), std::move(trace)};
}

std::pair<ModelCheckpoint, TraceTable> train_srgan(SRGenerator g, SRDiscriminator d,
                                                   const dataset::DatasetManifest& manifest,
                                                   int high_size, const SRTrainOptions& options) {
  if (manifest.count() == 0) throw EmptyDatasetError("SR training: empty manifest");
  const int channels = g->config().channels;
  return train_srgan(std::move(g), std::move(d), dataset::load_all(manifest, high_size, channels),
                     options);
}

}  // namespace usgen::superres
