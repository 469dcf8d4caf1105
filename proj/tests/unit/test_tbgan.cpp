#include <doctest.h>

#include "support/oracles.hpp"
#include "support/phantom.hpp"
#include "usgen/checkpoint.hpp"
#include "usgen/optim.hpp"
#include "usgen/tbgan.hpp"

#include <cmath>

using namespace usgen;
using namespace usgen::tbgan;

namespace {

double max_abs_diff(const torch::Tensor& a, const torch::Tensor& b) {
  return (a.to(torch::kFloat64) - b.to(torch::kFloat64)).abs().max().item<double>();
}

}  // namespace

TEST_SUITE("tbgan") {

TEST_CASE("single window equals global attention") {
  torch::manual_seed(0);
  const auto q = torch::randn({2, 8, 8, 2, 16});
  const auto k = torch::randn({2, 8, 8, 2, 16});
  const auto v = torch::randn({2, 8, 8, 2, 16});
  CHECK(max_abs_diff(windowed_attention(q, k, v, 8, 0), testing::global_attention(q, k, v)) < 1e-5);
}

TEST_CASE("windowed and shifted attention match brute force") {
  torch::manual_seed(1);
  const auto q = torch::randn({1, 8, 8, 2, 4});
  const auto k = torch::randn({1, 8, 8, 2, 4});
  const auto v = torch::randn({1, 8, 8, 2, 4});
  CHECK(max_abs_diff(windowed_attention(q, k, v, 4, 0), testing::brute_window_attention(q, k, v, 4, 0)) < 1e-5);
  CHECK(max_abs_diff(windowed_attention(q, k, v, 4, 2), testing::brute_window_attention(q, k, v, 4, 2)) < 1e-5);
  CHECK(max_abs_diff(windowed_attention(q, k, v, 4, 1), testing::brute_window_attention(q, k, v, 4, 1)) < 1e-5);
}

TEST_CASE("attention rows sum to one") {
  torch::manual_seed(2);
  WindowAttention attn(32, 2, 4);
  attn->bias_table.data().normal_(0.0, 0.5);
  const auto x = torch::randn({2, 8, 8, 32});
  for (const int shift : {0, 2}) {
    const auto w = attn->attention_weights(x, shift);
    CHECK(w.sizes() == torch::IntArrayRef{8, 2, 16, 16});
    CHECK(max_abs_diff(w.sum(-1), torch::ones({8, 2, 16})) < 1e-6);
    CHECK(w.min().item<float>() >= 0.0f);
  }
  CHECK(window_attention(attn, x, 4, 2).sizes() == x.sizes());
  CHECK_THROWS_AS(window_attention(attn, torch::randn({1, 6, 6, 32}), 4, 0), ShapeError);
  CHECK_THROWS_AS(window_attention(attn, x, 4, 4), ShapeError);
  CHECK_THROWS_AS(window_attention(attn, x, 8, 0), ShapeError);
}

TEST_CASE("cyclic shift is a bijection") {
  const auto x = torch::randn({1, 8, 8, 3});
  const auto there = torch::roll(x, {-2, -2}, {1, 2});
  CHECK_FALSE(torch::equal(there, x));
  CHECK(torch::equal(torch::roll(there, {2, 2}, {1, 2}), x));
  const auto mask = shifted_window_mask(8, 8, 4, 2);
  CHECK(mask.sizes() == torch::IntArrayRef{4, 16, 16});
  CHECK(torch::all(mask[0] == 0).item<bool>());
  CHECK(torch::all(mask.diagonal(0, 1, 2) == 0).item<bool>());
}

TEST_CASE("zeroed query and key give the projected window mean") {
  torch::manual_seed(3);
  const int dim = 8;
  WindowAttention attn(dim, 2, 4);
  {
    torch::NoGradGuard no_grad;
    attn->qkv->weight.narrow(0, 0, 2 * dim).zero_();
    attn->qkv->bias.narrow(0, 0, 2 * dim).zero_();
  }
  const auto x = torch::randn({1, 8, 8, dim});
  const auto out = attn(x, 0);
  const auto wv = attn->qkv->weight.narrow(0, 2 * dim, dim);
  const auto bv = attn->qkv->bias.narrow(0, 2 * dim, dim);
  for (int wy = 0; wy < 2; ++wy) {
    for (int wx = 0; wx < 2; ++wx) {
      const auto tile = x.index({0, torch::indexing::Slice(4 * wy, 4 * wy + 4), torch::indexing::Slice(4 * wx, 4 * wx + 4)});
      const auto mean_v = torch::matmul(tile.reshape({16, dim}), wv.t()).add(bv).mean(0);
      const auto expected = torch::matmul(mean_v, attn->proj->weight.t()).add(attn->proj->bias);
      for (int y = 0; y < 4; ++y) {
        for (int xx = 0; xx < 4; ++xx) CHECK(max_abs_diff(out[0][4 * wy + y][4 * wx + xx], expected) < 1e-5);
      }
    }
  }
}

TEST_CASE("relative position index covers the table") {
  const auto idx = relative_position_index(4);
  CHECK(idx.sizes() == torch::IntArrayRef{16, 16});
  CHECK(idx.min().item<std::int64_t>() == 0);
  CHECK(idx.max().item<std::int64_t>() == 48);
  CHECK(torch::all(idx.diagonal() == idx[0][0]).item<bool>());
}

TEST_CASE("generator shape, range and determinism") {
  torch::manual_seed(4);
  StyleGenerator g(StyleGeneratorConfig::tiny());
  g->eval();
  torch::NoGradGuard no_grad;
  const auto z = sample_latents(3, 64, 1);
  CHECK(torch::equal(z, sample_latents(3, 64, 1)));
  const auto a = generate(g, z, 5);
  CHECK(a.sizes() == torch::IntArrayRef{3, 1, 32, 32});
  CHECK(a.abs().max().item<float>() <= 1.0f);
  CHECK(torch::equal(a, generate(g, z, 5)));
  CHECK_FALSE(torch::equal(a, generate(g, sample_latents(3, 64, 2), 5)));
  CHECK_FALSE(torch::equal(a[0], a[1]));
  CHECK_THROWS_AS(generate(g, torch::zeros({1, 32}), 0), ShapeError);
}

TEST_CASE("full-size generator renders 256 by 256") {
  torch::manual_seed(5);
  StyleGeneratorConfig cfg;
  StyleGenerator g(cfg);
  torch::NoGradGuard no_grad;
  const auto img = generate(g, sample_latents(1, cfg.latent_dim, 0), 0);
  CHECK(img.sizes() == torch::IntArrayRef{1, 1, 256, 256});
  ConvDiscriminator d(cfg);
  CHECK(d(img).sizes() == torch::IntArrayRef{1, 1});
}

TEST_CASE("token widths halve above 32 pixels") {
  StyleGeneratorConfig cfg;
  CHECK(cfg.dim_at(4) == 256);
  CHECK(cfg.dim_at(32) == 256);
  CHECK(cfg.dim_at(64) == 128);
  CHECK(cfg.dim_at(256) == 32);
  CHECK(StyleGeneratorConfig::tiny().dim_at(32) == 64);
}

TEST_CASE("DiffAug identities") {
  const auto x = testing::sector_phantoms(3, 8, 1);
  CHECK(torch::equal(diffaug(x, DiffAugPolicy::parse(""), 4), x));
  CHECK(torch::equal(diffaug(x, DiffAugPolicy::parse("none"), 4), x));

  const auto policy = DiffAugPolicy::parse("color,translation,cutout", 0.0, 0.0);
  DiffAugParams zero;
  zero.brightness.assign(3, 0.0);
  zero.saturation.assign(3, 1.0);
  zero.contrast.assign(3, 1.0);
  zero.shift_x.assign(3, 0);
  zero.shift_y.assign(3, 0);
  zero.cutout_x.assign(3, 0);
  zero.cutout_y.assign(3, 0);
  zero.cutout_size = 0;
  CHECK(torch::equal(apply_diffaug(x, policy, zero), x));
  const auto drawn = draw_diffaug_params(policy, 3, 8, 8, 2);
  CHECK(drawn.cutout_size == 0);
  for (int i = 0; i < 3; ++i) {
    CHECK(drawn.shift_x[i] == 0);
    CHECK(drawn.shift_y[i] == 0);
  }
  CHECK(DiffAugPolicy::defaults().to_string() == "brightness,saturation,contrast,translation,cutout");
  CHECK_THROWS_AS(DiffAugPolicy::parse("blur"), ConfigError);
  CHECK_THROWS_AS(DiffAugPolicy::parse("cutout", 0.1, 1.5), ConfigError);
}

TEST_CASE("half-size cutout zeroes one 4x4 block of an 8x8 image") {
  const auto policy = DiffAugPolicy::parse("cutout", 0.125, 0.5);
  for (std::uint64_t seed = 0; seed < 20; ++seed) {
    const auto out = diffaug(torch::ones({2, 1, 8, 8}), policy, seed);
    const auto params = draw_diffaug_params(policy, 2, 8, 8, seed);
    for (int i = 0; i < 2; ++i) {
      CHECK((out[i] == 0).sum().item<std::int64_t>() == 16);
      CHECK((out[i] == 1).sum().item<std::int64_t>() == 48);
      const int cx = params.cutout_x[i], cy = params.cutout_y[i];
      CHECK(torch::all(out[i][0].narrow(0, cy, 4).narrow(1, cx, 4) == 0).item<bool>());
    }
  }
}

TEST_CASE("DiffAug draws are seed-determined and in range") {
  const auto policy = DiffAugPolicy::defaults();
  const auto a = draw_diffaug_params(policy, 50, 32, 32, 9);
  const auto b = draw_diffaug_params(policy, 50, 32, 32, 9);
  CHECK(a.brightness == b.brightness);
  CHECK(a.cutout_x == b.cutout_x);
  CHECK(a.cutout_size == 16);
  for (int i = 0; i < 50; ++i) {
    CHECK(a.brightness[i] >= -0.5);
    CHECK(a.brightness[i] < 0.5);
    CHECK(a.saturation[i] >= 0.0);
    CHECK(a.saturation[i] < 2.0);
    CHECK(a.contrast[i] >= 0.5);
    CHECK(a.contrast[i] < 1.5);
    CHECK(std::abs(a.shift_x[i]) <= 4);
    CHECK(a.cutout_x[i] + a.cutout_size <= 32);
  }
  const auto x = testing::sector_phantoms(4, 32, 2);
  CHECK(torch::equal(diffaug(x, policy, 3), diffaug(x, policy, 3)));
  CHECK_FALSE(torch::equal(diffaug(x, policy, 3), diffaug(x, policy, 4)));
}

TEST_CASE("translation shifts content and fills with zeros") {
  const auto policy = DiffAugPolicy::parse("translation", 0.25, 0.0);
  auto x = torch::arange(64, torch::kFloat32).view({1, 1, 8, 8}) + 1;
  DiffAugParams p;
  p.brightness = {0.0};
  p.saturation = {1.0};
  p.contrast = {1.0};
  p.shift_x = {2};
  p.shift_y = {-1};
  p.cutout_x = {0};
  p.cutout_y = {0};
  const auto out = apply_diffaug(x, policy, p);
  auto o = out.accessor<float, 4>();
  auto s = x.accessor<float, 4>();
  for (int y = 0; y < 8; ++y) {
    for (int xx = 0; xx < 8; ++xx) {
      const int sy = y + 1, sx = xx - 2;
      const float expected = (sy >= 0 && sy < 8 && sx >= 0 && sx < 8) ? s[0][0][sy][sx] : 0.0f;
      CHECK(o[0][0][y][xx] == expected);
    }
  }
}

TEST_CASE("DiffAug gradient matches finite differences") {
  const auto policy = DiffAugPolicy::defaults();
  const auto base = testing::sector_phantoms(2, 8, 3).to(torch::kFloat64);
  const auto params = draw_diffaug_params(policy, 2, 8, 8, 11);
  auto gen = make_generator(12);
  const auto weights = torch::randn({2, 1, 8, 8}, gen, torch::kFloat64);
  auto objective = [&](const torch::Tensor& in) { return (apply_diffaug(in, policy, params) * weights).pow(2).sum(); };

  auto x = base.clone().requires_grad_(true);
  objective(x).backward();
  const auto analytic = x.grad().clone();

  auto numeric = torch::zeros_like(base);
  const double h = 1e-6;
  auto flat = base.view(-1);
  auto nflat = numeric.view(-1);
  for (std::int64_t i = 0; i < flat.numel(); ++i) {
    auto up = base.clone(), down = base.clone();
    up.view(-1)[i] += h;
    down.view(-1)[i] -= h;
    nflat[i] = (objective(up).item<double>() - objective(down).item<double>()) / (2 * h);
  }
  const double rel = (analytic - numeric).norm().item<double>() / analytic.norm().item<double>();
  CHECK(rel < 1e-3);
  CHECK(analytic.abs().sum().item<double>() > 0.0);
}

TEST_CASE("APA update rule cases") {
  auto state = APAState::with_speed(16, 160.0, 0.6, 0.0);
  CHECK(state.step_size == doctest::Approx(0.1));
  const auto positive = torch::ones({8});
  std::vector<double> ps;
  for (int i = 0; i < 15; ++i) {
    state = apa_update(state, positive);
    ps.push_back(state.p);
  }
  CHECK(state.lambda_r == 1.0);
  for (int i = 0; i < 9; ++i) CHECK(ps[i] == doctest::Approx(0.1 * (i + 1)).epsilon(1e-12));
  CHECK(ps.back() == 1.0);
  for (const double p : ps) CHECK(p <= 1.0);

  APAState fixed;
  fixed.p = 0.3;
  fixed.lambda_r = 0.5;
  fixed.target = 0.5;
  fixed.step_size = 0.05;
  fixed.ema_decay = 1.0;
  const auto same = apa_update(fixed, torch::tensor({-1.0, 1.0, 2.0}));
  CHECK(same.p == 0.3);
  CHECK(same.lambda_r == 0.5);

  APAState low;
  low.p = 0.0;
  low.lambda_r = -0.5;
  low.target = 0.6;
  low.step_size = 0.1;
  const auto still = apa_update(low, -torch::ones({4}));
  CHECK(still.p == 0.0);
  CHECK(still.lambda_r < low.target);

  const auto logits = torch::tensor({0.3, -0.2, 1.0, 0.0});
  const auto u1 = apa_update(low, logits);
  const auto u2 = apa_update(low, logits);
  CHECK(u1.p == u2.p);
  CHECK(u1.lambda_r == u2.lambda_r);
  // lambda_r moves toward mean sign 0.25 by a factor 1 - decay.
  CHECK(u1.lambda_r == doctest::Approx(-0.5 + 0.01 * (0.25 + 0.5)).epsilon(1e-12));
  CHECK_THROWS_AS(apa_update(low, torch::zeros({0})), ShapeError);
}

TEST_CASE("APA mixing probability") {
  const auto real = torch::zeros({1000, 1, 2, 2});
  const auto fake = torch::ones({1000, 1, 2, 2});
  CHECK(torch::equal(apa_mix(real, fake, 0.0, 1), real));
  CHECK(torch::equal(apa_mix(real, fake, 1.0, 1), fake));
  const double frac = apa_mix(real, fake, 0.5, 1).mean().item<double>();
  CHECK(frac >= 0.45);
  CHECK(frac <= 0.55);
  CHECK(torch::equal(apa_mix(real, fake, 0.5, 1), apa_mix(real, fake, 0.5, 1)));
  CHECK_THROWS_AS(apa_mix(real, torch::ones({999, 1, 2, 2}), 0.5, 1), ShapeError);
}

TEST_CASE("losses with a neutral discriminator equal ln 2") {
  const auto real = testing::sector_phantoms(4, 8, 4);
  const auto fake = torch::zeros_like(real);
  Critic zero = [](const torch::Tensor& x) { return (x * 0.0).flatten(1).sum(1, true); };
  const auto losses = gan_losses_from_fakes(zero, fake, real, GanLossOptions{}, APAState{}, 1, 7);
  CHECK(losses.g_loss.item<double>() == doctest::Approx(std::log(2.0)).epsilon(1e-6));
  CHECK(losses.d_main.item<double>() == doctest::Approx(std::log(2.0)).epsilon(1e-6));
  CHECK_FALSE(losses.r1.has_value());
  const auto lazy = gan_losses_from_fakes(zero, fake, real, GanLossOptions{}, APAState{}, 32, 7);
  REQUIRE(lazy.r1.has_value());
  CHECK(lazy.r1->item<double>() == 0.0);
}

TEST_CASE("R1 of a linear probe is half gamma times the squared weight norm") {
  auto gen = make_generator(13);
  const auto w = torch::randn({1, 1, 8, 8}, gen);
  Critic linear = [&](const torch::Tensor& x) { return (x * w).flatten(1).sum(1, true); };
  const auto real = testing::sector_phantoms(3, 8, 5);
  const double gamma = 10.0;
  const double expected = 0.5 * gamma * w.pow(2).sum().item<double>();
  CHECK(r1_penalty(linear, real, gamma).item<double>() == doctest::Approx(expected).epsilon(1e-6));

  Critic constant = [](const torch::Tensor& x) { return torch::ones({x.size(0), 1}); };
  CHECK(r1_penalty(constant, real, gamma).item<double>() == 0.0);

  GanLossOptions opts;
  opts.policy = DiffAugPolicy::parse("none");
  const auto at16 = gan_losses_from_fakes(linear, torch::zeros_like(real), real, opts, APAState{}, 16, 1);
  REQUIRE(at16.r1.has_value());
  CHECK(at16.r1->item<double>() == doctest::Approx(expected).epsilon(1e-6));
  CHECK(at16.d_loss.item<double>() == doctest::Approx(at16.d_main.item<double>() + expected).epsilon(1e-6));
  CHECK_FALSE(gan_losses_from_fakes(linear, torch::zeros_like(real), real, opts, APAState{}, 17, 1).r1.has_value());
}

TEST_CASE("default optimizers apply a ten times larger discriminator step") {
  const TBGanTrainOptions defaults;
  CHECK(defaults.adam_d.lr == 1e-4);
  CHECK(defaults.adam_g.lr == 1e-5);
  // Double precision so a 1e-5 step is not lost to rounding near 1.
  auto wg = torch::ones({4}, torch::kFloat64).requires_grad_(true);
  auto wd = torch::ones({4}, torch::kFloat64).requires_grad_(true);
  optim::Adam g_opt({{"w", wg}}, defaults.adam_g);
  optim::Adam d_opt({{"w", wd}}, defaults.adam_d);
  const auto x = torch::tensor({0.5, -1.0, 2.0, 0.25}, torch::kFloat64);
  (wg * x).sum().backward();
  (wd * x).sum().backward();
  const auto g_before = wg.detach().clone();
  const auto d_before = wd.detach().clone();
  g_opt.step();
  d_opt.step();
  const double dg = (wg.detach() - g_before).abs().sum().item<double>();
  const double dd = (wd.detach() - d_before).abs().sum().item<double>();
  CHECK(dd / dg == doctest::Approx(10.0).epsilon(1e-3));
}

TEST_CASE("short training keeps losses finite and p in range") {
  const auto data = testing::sector_phantoms(8, 32, 6);
  TBGanTrainOptions opts;
  opts.stage.epochs = 6;
  opts.stage.unit = EpochUnit::Step;
  opts.stage.batch_size = 4;
  opts.stage.seed = 3;
  opts.losses.r1_interval = 2;
  opts.apa_images = 40.0;
  torch::manual_seed(7);
  StyleGeneratorConfig cfg = StyleGeneratorConfig::tiny();
  const auto [ckpt, trace] = train_tbgan(StyleGenerator(cfg), ConvDiscriminator(cfg), data, opts);
  REQUIRE(trace.rows.size() == 6);
  for (const auto& row : trace.rows) {
    for (const double v : row) CHECK(std::isfinite(v));
  }
  for (const double p : trace.column("apa_p")) {
    CHECK(p >= 0.0);
    CHECK(p <= 1.0);
  }
  CHECK(ckpt.has("tbgan/g/const_input"));
  CHECK(ckpt.extra["steps"]["tbgan"].get<std::int64_t>() == 6);
}

TEST_CASE("transfer from a different architecture names the differing keys") {
  auto small = StyleGeneratorConfig::tiny();
  small.latent_dim = 32;
  ModelCheckpoint init;
  init.pipeline = "tbgan";
  init.architecture = small.echo();
  const auto cfg = StyleGeneratorConfig::tiny();
  TBGanTrainOptions opts;
  try {
    train_tbgan(StyleGenerator(cfg), ConvDiscriminator(cfg), testing::sector_phantoms(2, 32, 1), opts, &init);
    FAIL("expected ConfigMismatchError");
  } catch (const ConfigMismatchError& e) {
    CHECK(std::string(e.what()).find("tbgan.latent_dim") != std::string::npos);
  }
}

TEST_CASE("transfer loads weights and starts fresh optimizers") {
  const auto cfg = StyleGeneratorConfig::tiny();
  const auto data = testing::sector_phantoms(4, 32, 2);
  TBGanTrainOptions opts;
  opts.stage.epochs = 1;
  opts.stage.unit = EpochUnit::Step;
  opts.stage.batch_size = 2;
  torch::manual_seed(8);
  const auto [first, t1] = train_tbgan(StyleGenerator(cfg), ConvDiscriminator(cfg), data, opts);
  opts.stage.epochs = 0;
  torch::manual_seed(9);
  const auto [second, t2] = train_tbgan(StyleGenerator(cfg), ConvDiscriminator(cfg), data, opts, &first);
  for (const auto& [name, value] : first.arrays) {
    if (name.rfind("tbgan/g/", 0) == 0 || name.rfind("tbgan/d/", 0) == 0) CHECK(torch::equal(second.get(name), value));
  }
  CHECK(second.extra["steps"]["tbgan"].get<std::int64_t>() == 0);
}

}  // TEST_SUITE
