#include <doctest.h>

#include "support/phantom.hpp"
#include "usgen/checkpoint.hpp"
#include "usgen/diffusion.hpp"
#include "usgen/optim.hpp"
#include "usgen/tbgan.hpp"

#include <fstream>
#include <iterator>

using namespace usgen;
namespace fs = std::filesystem;

namespace {

std::string read_bytes(const fs::path& file) {
  std::ifstream in(file, std::ios::binary);
  return {std::istreambuf_iterator<char>(in), {}};
}

void write_bytes(const fs::path& file, const std::string& bytes) {
  std::ofstream(file, std::ios::binary | std::ios::trunc).write(bytes.data(), static_cast<std::streamsize>(bytes.size()));
}

ModelCheckpoint sample_checkpoint() {
  ModelCheckpoint c;
  c.pipeline = "dsr";
  c.architecture = {{"unet.base_channels", "32"}, {"unet.image_size", "16"}};
  c.stage = "diffusion";
  c.epoch = 7;
  c.rng = {42, 7};
  c.created = "2026-01-01T00:00:00Z";
  c.config_text = "pipeline = dsr\nseed = 42\n";
  c.extra["steps"] = 12;
  auto gen = make_generator(1);
  c.put("a", torch::randn({3, 4}, gen));
  c.put("b/c", torch::randn({2, 1, 5}, gen));
  c.put("scalar", torch::tensor(3.5f));
  return c;
}

}  // namespace

TEST_SUITE("checkpoint") {

TEST_CASE("save and load round-trip every field bit-exactly") {
  const auto dir = testing::scratch_dir("ckpt_roundtrip");
  const auto c = sample_checkpoint();
  save_checkpoint(c, dir / "c.ckpt");
  const auto back = load_checkpoint(dir / "c.ckpt");
  CHECK(back.format_version == kCheckpointFormatVersion);
  CHECK(back.pipeline == c.pipeline);
  CHECK(back.architecture == c.architecture);
  CHECK(back.stage == c.stage);
  CHECK(back.epoch == 7);
  CHECK(back.rng.seed == 42);
  CHECK(back.rng.epoch == 7);
  CHECK(back.created == c.created);
  CHECK(back.config_text == c.config_text);
  CHECK(back.extra == c.extra);
  REQUIRE(back.arrays.size() == c.arrays.size());
  for (std::size_t i = 0; i < c.arrays.size(); ++i) {
    CHECK(back.arrays[i].first == c.arrays[i].first);
    CHECK(torch::equal(back.arrays[i].second, c.arrays[i].second));
  }
  save_checkpoint(back, dir / "d.ckpt");
  CHECK(read_bytes(dir / "c.ckpt") == read_bytes(dir / "d.ckpt"));
  CHECK_FALSE(fs::exists(dir / "c.ckpt.tmp"));
}

TEST_CASE("truncated or corrupted files raise checksum errors") {
  const auto dir = testing::scratch_dir("ckpt_corrupt");
  save_checkpoint(sample_checkpoint(), dir / "c.ckpt");
  const auto bytes = read_bytes(dir / "c.ckpt");
  for (const std::size_t keep : {std::size_t{4}, std::size_t{14}, bytes.size() / 2, bytes.size() - 1}) {
    write_bytes(dir / "t.ckpt", bytes.substr(0, keep));
    CHECK_THROWS_AS(load_checkpoint(dir / "t.ckpt"), ChecksumError);
  }
  for (const std::size_t pos : {std::size_t{30}, bytes.size() - 3}) {
    auto flipped = bytes;
    flipped[pos] = static_cast<char>(flipped[pos] ^ 0x20);
    write_bytes(dir / "f.ckpt", flipped);
    CHECK_THROWS_AS(load_checkpoint(dir / "f.ckpt"), ChecksumError);
  }
  write_bytes(dir / "g.ckpt", bytes + "x");
  CHECK_THROWS_AS(load_checkpoint(dir / "g.ckpt"), ChecksumError);
  CHECK_THROWS_AS(load_checkpoint(dir / "missing.ckpt"), LoadError);
}

TEST_CASE("older format version is rejected naming both versions") {
  const auto dir = testing::scratch_dir("ckpt_version");
  auto c = sample_checkpoint();
  c.format_version = 0;
  save_checkpoint(c, dir / "v0.ckpt");
  try {
    load_checkpoint(dir / "v0.ckpt");
    FAIL("expected VersionError");
  } catch (const VersionError& e) {
    const std::string msg = e.what();
    CHECK(msg.find("version 0") != std::string::npos);
    CHECK(msg.find("version " + std::to_string(kCheckpointFormatVersion)) != std::string::npos);
  }
}

TEST_CASE("architecture diff lists every differing key") {
  const std::map<std::string, std::string> saved{{"a", "1"}, {"b", "2"}, {"c", "3"}};
  const std::map<std::string, std::string> current{{"a", "1"}, {"b", "5"}, {"d", "4"}};
  const auto diff = architecture_diff(saved, current);
  CHECK(diff == std::vector<std::string>{"b: saved=2 current=5", "c: saved=3 current=<absent>",
                                         "d: saved=<absent> current=4"});
  CHECK(architecture_diff(saved, saved).empty());
  CHECK_NOTHROW(require_same_architecture(saved, saved));
  CHECK_THROWS_AS(require_same_architecture(saved, current), ConfigMismatchError);
}

TEST_CASE("reloaded generator regenerates identical images") {
  const auto dir = testing::scratch_dir("ckpt_regen");
  const auto cfg = tbgan::StyleGeneratorConfig::tiny();
  torch::manual_seed(11);
  tbgan::StyleGenerator g(cfg);
  ModelCheckpoint c;
  c.architecture = cfg.echo();
  put_module(c, "tbgan/g", *g);
  save_checkpoint(c, dir / "g.ckpt");

  torch::manual_seed(12);
  tbgan::StyleGenerator h(cfg);
  const auto loaded = load_checkpoint(dir / "g.ckpt");
  require_same_architecture(loaded.architecture, cfg.echo());
  load_module(loaded, "tbgan/g", *h);
  torch::NoGradGuard no_grad;
  const auto z = tbgan::sample_latents(2, cfg.latent_dim, 3);
  CHECK(torch::equal(tbgan::generate(g, z, 4), tbgan::generate(h, z, 4)));

  auto other = cfg;
  other.base_dim = 32;
  tbgan::StyleGenerator wrong(other);
  CHECK_THROWS_AS(load_module(loaded, "tbgan/g", *wrong), ConfigMismatchError);
}

TEST_CASE("Adam matches the bias-corrected update by hand") {
  auto w = torch::tensor({1.0f, -2.0f}).requires_grad_(true);
  optim::Adam opt({{"w", w}}, {0.1, 0.9, 0.999, 1e-8, 0.0});
  const std::vector<double> grads1{0.5, -1.0}, grads2{0.25, 2.0};
  double m[2] = {0, 0}, v[2] = {0, 0}, ref[2] = {1.0, -2.0};
  for (int step = 1; step <= 2; ++step) {
    const auto& g = step == 1 ? grads1 : grads2;
    opt.zero_grad();
    (w * torch::tensor({static_cast<float>(g[0]), static_cast<float>(g[1])})).sum().backward();
    opt.step();
    for (int i = 0; i < 2; ++i) {
      m[i] = 0.9 * m[i] + 0.1 * g[i];
      v[i] = 0.999 * v[i] + 0.001 * g[i] * g[i];
      const double mh = m[i] / (1 - std::pow(0.9, step));
      const double vh = v[i] / (1 - std::pow(0.999, step));
      ref[i] -= 0.1 * mh / (std::sqrt(vh) + 1e-8);
    }
  }
  CHECK(w[0].item<double>() == doctest::Approx(ref[0]).epsilon(1e-6));
  CHECK(w[1].item<double>() == doctest::Approx(ref[1]).epsilon(1e-6));
  CHECK(opt.steps() == 2);
}

TEST_CASE("optimizer state resumes bit-exactly") {
  auto run = [](int split) {
    torch::manual_seed(5);
    auto lin = torch::nn::Linear(4, 2);
    optim::Adam opt(*lin, {});
    ModelCheckpoint saved;
    for (int step = 0; step < 6; ++step) {
      if (step == split) {
        put_module(saved, "m", *lin);
        opt.save(saved, "adam");
        torch::manual_seed(99);
        lin = torch::nn::Linear(4, 2);
        opt = optim::Adam(*lin, {});
        load_module(saved, "m", *lin);
        opt.load(saved, "adam");
      }
      auto gen = make_generator(static_cast<std::uint64_t>(step));
      opt.zero_grad();
      lin(torch::randn({3, 4}, gen)).pow(2).sum().backward();
      opt.step();
    }
    return lin->weight.detach().clone();
  };
  CHECK(torch::equal(run(-1), run(3)));
}

TEST_CASE("diffusion finetuner resumes bit-exactly") {
  const auto data = testing::sector_phantoms(8, 16, 1);
  const auto schedule = diffusion::build_schedule(10, 1e-4, 0.02);
  diffusion::FinetuneOptions opts;
  opts.stage.batch_size = 4;
  opts.stage.seed = 9;
  auto fresh = [&] {
    torch::manual_seed(1);
    return diffusion::Finetuner(diffusion::UNet(diffusion::UNetConfig::tiny(16)), schedule, opts, data);
  };
  auto straight = fresh();
  for (int e = 0; e < 4; ++e) straight.train_epoch();

  auto first = fresh();
  for (int e = 0; e < 2; ++e) first.train_epoch();
  ModelCheckpoint mid;
  first.save(mid, "diffusion");
  torch::manual_seed(77);
  diffusion::Finetuner second(diffusion::UNet(diffusion::UNetConfig::tiny(16)), schedule, opts, data);
  second.load(mid, "diffusion");
  CHECK(second.epoch() == 2);
  for (int e = 0; e < 2; ++e) second.train_epoch();

  ModelCheckpoint a, b;
  straight.save(a, "x");
  second.save(b, "x");
  REQUIRE(a.arrays.size() == b.arrays.size());
  for (std::size_t i = 0; i < a.arrays.size(); ++i) CHECK(torch::equal(a.arrays[i].second, b.arrays[i].second));
}

}  // TEST_SUITE
