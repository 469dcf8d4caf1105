#include <doctest.h>

#include "support/phantom.hpp"
#include "usgen/checkpoint.hpp"
#include "usgen/diffusion.hpp"

#include <cmath>

using namespace usgen;
using namespace usgen::diffusion;

namespace {

NoiseModel zero_model() {
  return [](const torch::Tensor& x, const torch::Tensor&) { return torch::zeros_like(x); };
}

}  // namespace

TEST_SUITE("diffusion") {

TEST_CASE("schedule hand examples") {
  const auto one = build_schedule(1, 0.5, 0.5);
  REQUIRE(one.steps() == 1);
  CHECK(one.alpha_bar[0] == 0.5);

  const auto two = build_schedule(2, 0.1, 0.3);
  CHECK(two.beta[0] == doctest::Approx(0.1).epsilon(1e-15));
  CHECK(two.beta[1] == doctest::Approx(0.3).epsilon(1e-15));
  CHECK(two.alpha_bar[0] == doctest::Approx(0.9).epsilon(1e-15));
  CHECK(two.alpha_bar[1] == doctest::Approx(0.63).epsilon(1e-15));
}

TEST_CASE("standard schedule decreases to about 4e-5") {
  const auto s = build_schedule(1000, 1e-4, 0.02);
  long double prod = 1.0L;
  for (int t = 0; t < 1000; ++t) {
    const long double beta = 1e-4L + (0.02L - 1e-4L) * t / 999.0L;
    prod *= 1.0L - beta;
    CHECK(s.alpha[t] == doctest::Approx(1.0 - s.beta[t]).epsilon(1e-15));
    if (t > 0) CHECK(s.alpha_bar[t] < s.alpha_bar[t - 1]);
  }
  CHECK(std::abs(s.alpha_bar[999] - static_cast<double>(prod)) / static_cast<double>(prod) < 1e-3);
  CHECK(s.alpha_bar[999] == doctest::Approx(4.0e-5).epsilon(0.03));
}

TEST_CASE("schedule parameter violations are rejected") {
  CHECK_THROWS_AS(build_schedule(0, 1e-4, 0.02), ConfigError);
  CHECK_THROWS_AS(build_schedule(10, 0.0, 0.02), ConfigError);
  CHECK_THROWS_AS(build_schedule(10, 0.03, 0.02), ConfigError);
  CHECK_THROWS_AS(build_schedule(10, 1e-4, 1.0), ConfigError);
}

TEST_CASE("forward noising closed form") {
  const auto ones = torch::ones({2, 1, 4, 4});
  const auto at_quarter = q_sample_coeffs(ones, {0.25, 0.25}, ones);
  CHECK(torch::allclose(at_quarter, torch::full_like(ones, 0.5 + std::sqrt(0.75)), 0.0, 1e-6));
  CHECK(at_quarter[0][0][0][0].item<float>() == doctest::Approx(1.3660).epsilon(1e-4));

  const auto x0 = torch::randn({3, 1, 4, 4});
  CHECK(torch::equal(q_sample_coeffs(x0, {1.0, 1.0, 1.0}, torch::randn({3, 1, 4, 4})), x0));

  const auto s = build_schedule(10, 1e-4, 0.02);
  const auto t = torch::tensor({0, 4, 9}, torch::kLong);
  const auto noised = q_sample(x0, t, torch::zeros_like(x0), s);
  for (int i = 0; i < 3; ++i) {
    const double ab = s.alpha_bar[t[i].item<std::int64_t>()];
    CHECK(torch::allclose(noised[i], x0[i] * std::sqrt(ab), 0.0, 1e-7));
  }
  CHECK_THROWS_AS(q_sample(x0, t, torch::zeros({3, 1, 4, 5}), s), ShapeError);
  CHECK_THROWS_AS(q_sample(x0, torch::tensor({0, 4, 10}, torch::kLong), x0, s), ShapeError);
}

TEST_CASE("variance of noised zeros follows 1 - alpha_bar") {
  const auto s = build_schedule(100, 1e-4, 0.02);
  for (const std::int64_t step : {0, 30, 99}) {
    auto gen = make_generator(static_cast<std::uint64_t>(step) + 1);
    const auto noise = torch::randn({16, 1, 32, 32}, gen);
    const auto x = q_sample(torch::zeros_like(noise), torch::full({16}, step, torch::kLong), noise, s);
    const double var = x.to(torch::kFloat64).var().item<double>();
    CHECK(std::abs(var - (1.0 - s.alpha_bar[step])) / (1.0 - s.alpha_bar[step]) < 0.1);
  }
}

TEST_CASE("perfect and zero predictors bracket the loss") {
  const auto s = build_schedule(50, 1e-4, 0.02);
  const auto x0 = torch::zeros({4, 1, 8, 8});
  // With x0 = 0 the noised input is sqrt(1 - alpha_bar) * eps, so eps is recoverable.
  NoiseModel perfect = [&](const torch::Tensor& x, const torch::Tensor& t) {
    std::vector<double> scale;
    for (std::int64_t i = 0; i < t.size(0); ++i) scale.push_back(std::sqrt(1.0 - s.alpha_bar[t[i].item<std::int64_t>()]));
    return x / torch::tensor(scale, torch::kFloat64).to(torch::kFloat32).view({-1, 1, 1, 1});
  };
  CHECK(denoise_loss(perfect, x0, s, 3).item<double>() < 1e-10);

  const auto big = torch::zeros({4, 1, 16, 16});
  const double zero_loss = denoise_loss(zero_model(), big, s, 5).item<double>();
  CHECK(zero_loss == doctest::Approx(1.0).epsilon(0.1));
  CHECK(denoise_loss(zero_model(), big, s, 5).item<double>() == zero_loss);
}

TEST_CASE("non-finite prediction raises a numeric error naming the step") {
  const auto s = build_schedule(5, 1e-4, 0.02);
  NoiseModel bad = [](const torch::Tensor& x, const torch::Tensor&) { return torch::full_like(x, NAN); };
  try {
    denoise_loss(bad, torch::zeros({2, 1, 8, 8}), s, 1, 17);
    FAIL("expected NumericError");
  } catch (const NumericError& e) {
    CHECK(std::string(e.what()).find("17") != std::string::npos);
  }
}

TEST_CASE("reverse step hand example") {
  DiffusionSchedule s;
  s.beta = {0.1};
  s.alpha = {0.9};
  s.alpha_bar = {0.5};
  const auto x = torch::ones({1, 1, 4, 4});
  const auto out = p_sample_step_with(zero_model(), x, 0, s, torch::randn({1, 1, 4, 4}));
  CHECK(torch::allclose(out, torch::full_like(x, 1.0 / std::sqrt(0.9)), 0.0, 1e-6));
  CHECK(out[0][0][0][0].item<float>() == doctest::Approx(1.0541).epsilon(1e-4));

  // At t = 0 no noise is drawn, whatever the seed.
  CHECK(torch::equal(p_sample_step(zero_model(), x, 0, s, 1), p_sample_step(zero_model(), x, 0, s, 2)));

  const auto s2 = build_schedule(4, 0.1, 0.1);
  const auto a = p_sample_step(zero_model(), x, 2, s2, 9);
  CHECK(torch::equal(a, p_sample_step(zero_model(), x, 2, s2, 9)));
  CHECK_FALSE(torch::equal(a, p_sample_step(zero_model(), x, 2, s2, 10)));
  CHECK_THROWS_AS(p_sample_step(zero_model(), x, 4, s2, 1), ShapeError);
}

TEST_CASE("single-step chain is the clamped scaled noise") {
  const auto s = build_schedule(1, 0.3, 0.3);
  const auto out = sample(zero_model(), s, 3, 8, 1, 21);
  auto gen = make_generator(derive_seed(21, {0}));
  const auto start = torch::randn({3, 1, 8, 8}, gen);
  CHECK(torch::allclose(out, (start / std::sqrt(0.7)).clamp(-1.0, 1.0), 0.0, 1e-6));
}

TEST_CASE("sampling shape, range and determinism") {
  const auto s = build_schedule(5, 1e-4, 0.02);
  const auto big = sample(zero_model(), s, 2, 128, 1, 4);
  CHECK(big.sizes() == torch::IntArrayRef{2, 1, 128, 128});
  CHECK(big.min().item<float>() >= -1.0f);
  CHECK(big.max().item<float>() <= 1.0f);

  torch::manual_seed(0);
  UNet net(UNetConfig::tiny(16));
  auto model = as_noise_model(net);
  const auto a = sample(model, s, 2, 16, 1, 8);
  CHECK(a.sizes() == torch::IntArrayRef{2, 1, 16, 16});
  CHECK(torch::equal(a, sample(model, s, 2, 16, 1, 8)));
  CHECK_FALSE(torch::equal(a, sample(model, s, 2, 16, 1, 9)));
}

TEST_CASE("U-Net preserves the image shape") {
  torch::manual_seed(1);
  UNet net(UNetConfig::tiny(32));
  const auto x = torch::randn({2, 1, 32, 32});
  const auto y = net->forward(x, torch::tensor({0, 49}, torch::kLong));
  CHECK(y.sizes() == x.sizes());
  CHECK(torch::isfinite(y).all().item<bool>());
  const auto echo = UNetConfig::tiny(32).echo();
  CHECK(echo == UNetConfig::tiny(32).echo());
  CHECK(echo != UNetConfig::tiny(16).echo());
}

TEST_CASE("zero epochs return the initial weights and an empty trace") {
  torch::manual_seed(2);
  UNet net(UNetConfig::tiny(16));
  ModelCheckpoint before;
  put_module(before, "diffusion/model", *net);
  FinetuneOptions opts;
  opts.stage.epochs = 0;
  const auto [ckpt, trace] = finetune(net, testing::sector_phantoms(4, 16, 1), build_schedule(10, 1e-4, 0.02), opts);
  CHECK(trace.empty());
  CHECK(trace.columns == std::vector<std::string>{"epoch", "mean_loss", "wall_time_s"});
  for (const auto& [name, value] : before.arrays) CHECK(torch::equal(ckpt.get(name), value));
}

TEST_CASE("short finetune lowers the loss and is reproducible") {
  const auto data = testing::sector_phantoms(16, 16, 2);
  FinetuneOptions opts;
  opts.stage.epochs = 30;
  opts.stage.batch_size = 8;
  opts.stage.seed = 5;
  opts.stage.use_augment = false;
  opts.adam.lr = 2e-3;
  const auto s = build_schedule(20, 1e-4, 0.02);
  auto run = [&] {
    torch::manual_seed(3);
    return finetune(UNet(UNetConfig::tiny(16)), data, s, opts);
  };
  const auto [a, ta] = run();
  const auto [b, tb] = run();
  const auto loss = ta.column("mean_loss");
  REQUIRE(loss.size() == 30);
  const double head = (loss[0] + loss[1] + loss[2] + loss[3] + loss[4]) / 5.0;
  const double tail = (loss[25] + loss[26] + loss[27] + loss[28] + loss[29]) / 5.0;
  CHECK(tail < head);
  CHECK(loss == tb.column("mean_loss"));
  for (const auto& [name, value] : a.arrays) CHECK(torch::equal(b.get(name), value));
}

}  // TEST_SUITE
