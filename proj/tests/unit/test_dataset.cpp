#include <doctest.h>

#include "support/phantom.hpp"
#include "usgen/dataset.hpp"

#include <cmath>
#include <fstream>
#include <map>
#include <set>

using namespace usgen;
using namespace usgen::dataset;
namespace fs = std::filesystem;

namespace {

// Writes an 8-bit single-channel image whose level at (y, x) is level(y, x).
template <class Fn>
fs::path write_gray(const fs::path& file, int width, int height, Fn level) {
  auto t = torch::empty({1, 1, height, width});
  auto a = t.accessor<float, 4>();
  for (int y = 0; y < height; ++y) {
    for (int x = 0; x < width; ++x) a[0][0][y][x] = normalize(static_cast<std::uint8_t>(level(y, x)));
  }
  save_png(t, 0, file);
  return file;
}

}  // namespace

TEST_SUITE("dataset") {

TEST_CASE("normalize and denormalize round-trip every 8-bit level") {
  for (int v = 0; v < 256; ++v) {
    const float x = normalize(static_cast<std::uint8_t>(v));
    CHECK(x >= -1.0f);
    CHECK(x <= 1.0f);
    CHECK(denormalize(x) == v);
  }
  CHECK(normalize(0) == -1.0f);
  CHECK(normalize(255) == 1.0f);
}

TEST_CASE("non-square source is center-cropped and resized") {
  const auto dir = testing::scratch_dir("ds_crop");
  const auto file = write_gray(dir / "wide.png", 692, 480, [](int y, int x) { return (x + 3 * y) % 256; });
  const auto img = load_image_file(file, 128, 1);
  CHECK(img.sizes() == torch::IntArrayRef{1, 1, 128, 128});
  CHECK(img.min().item<float>() >= -1.0f);
  CHECK(img.max().item<float>() <= 1.0f);

  // A 12x8 source cropped to its central 8x8 needs no resampling.
  const auto small = write_gray(dir / "small.png", 12, 8, [](int y, int x) { return 20 * x + y; });
  const auto crop = load_image_file(small, 8, 1);
  auto a = crop.accessor<float, 4>();
  for (int y = 0; y < 8; ++y) {
    for (int x = 0; x < 8; ++x) CHECK(a[0][0][y][x] == normalize(static_cast<std::uint8_t>(20 * (x + 2) + y)));
  }
}

TEST_CASE("square source at its own size equals direct normalization") {
  const auto dir = testing::scratch_dir("ds_square");
  auto level = [](int y, int x) { return (7 * x + 13 * y) % 256; };
  const auto file = write_gray(dir / "sq.png", 128, 128, level);
  const auto img = load_image_file(file, 128, 1);
  auto a = img.accessor<float, 4>();
  double worst = 0.0;
  for (int y = 0; y < 128; ++y) {
    for (int x = 0; x < 128; ++x) {
      worst = std::max(worst, std::abs(double(a[0][0][y][x]) - normalize(static_cast<std::uint8_t>(level(y, x)))));
    }
  }
  CHECK(worst == 0.0);
  CHECK(load_image_file(file, 256, 1).size(3) == 256);
}

TEST_CASE("all-white source loads as exactly +1") {
  const auto dir = testing::scratch_dir("ds_white");
  const auto file = write_gray(dir / "white.png", 40, 30, [](int, int) { return 255; });
  const auto img = load_image_file(file, 16, 1);
  CHECK(torch::all(img == 1.0f).item<bool>());
}

TEST_CASE("RGB source converts to rounded luminance") {
  const auto dir = testing::scratch_dir("ds_rgb");
  const int r = 200, g = 30, b = 90;
  auto rgb = torch::empty({1, 3, 8, 8});
  rgb[0][0].fill_(normalize(r));
  rgb[0][1].fill_(normalize(g));
  rgb[0][2].fill_(normalize(b));
  save_png(rgb, 0, dir / "rgb.png");
  const auto gray = load_image_file(dir / "rgb.png", 8, 1);
  const auto expected = normalize(static_cast<std::uint8_t>(std::lround(0.299 * r + 0.587 * g + 0.114 * b)));
  CHECK(torch::all(gray == expected).item<bool>());
  const auto color = load_image_file(dir / "rgb.png", 8, 3);
  CHECK(torch::equal(color, rgb));
}

TEST_CASE("undecodable file raises a load error naming it") {
  const auto dir = testing::scratch_dir("ds_bad");
  std::ofstream(dir / "broken.png") << "not a png";
  try {
    load_image_file(dir / "broken.png", 8, 1);
    FAIL("expected LoadError");
  } catch (const LoadError& e) {
    CHECK(std::string(e.what()).find("broken.png") != std::string::npos);
  }
  CHECK_THROWS_AS(load_image_file(dir / "broken.png", 12, 1), ShapeError);
}

TEST_CASE("scan filters by plane, sorts, and reports unreadable files") {
  const auto dir = testing::scratch_dir("ds_scan");
  testing::write_phantoms(dir / "cerebellum", 5, 16, 1);
  testing::write_phantoms(dir / "thalamic", 3, 16, 2);
  fs::create_directories(dir / "cerebellum" / "extra");
  std::ofstream(dir / "cerebellum" / "extra" / "corrupt.png") << "garbage";

  const auto cer = scan_dataset(dir, Plane::TransCerebellum);
  CHECK(cer.manifest.count() == 5);
  CHECK(cer.manifest.records.size() == cer.manifest.count());
  CHECK(cer.warnings.size() == 1);
  CHECK(cer.warnings[0].find("corrupt.png") != std::string::npos);
  for (std::size_t i = 1; i < cer.manifest.records.size(); ++i) {
    CHECK(cer.manifest.records[i - 1].path < cer.manifest.records[i].path);
  }
  for (const auto& r : cer.manifest.records) {
    CHECK(r.plane == Plane::TransCerebellum);
    CHECK(r.width == 16);
    CHECK(r.height == 16);
  }
  CHECK(scan_dataset(dir, Plane::TransThalamic).manifest.count() == 3);
  const auto all = scan_dataset(dir, Plane::Other);
  CHECK(all.manifest.count() == 8);
  CHECK(all.manifest.checksum == manifest_checksum(all.manifest.records));
  CHECK(cer.manifest.checksum != all.manifest.checksum);
}

TEST_CASE("scan counts match the dataset sizes of both planes") {
  const auto dir = testing::scratch_dir("ds_counts");
  auto one = torch::zeros({1, 1, 8, 8});
  fs::create_directories(dir / "trans_cerebellum");
  fs::create_directories(dir / "trans_thalamic");
  for (int i = 0; i < 408; ++i) save_png(one, 0, dir / "trans_cerebellum" / ("img_" + std::to_string(i) + ".png"));
  for (int i = 0; i < 1072; ++i) save_png(one, 0, dir / "trans_thalamic" / ("img_" + std::to_string(i) + ".png"));
  CHECK(scan_dataset(dir / "trans_cerebellum", Plane::TransCerebellum).manifest.count() == 408);
  CHECK(scan_dataset(dir / "trans_thalamic", Plane::TransThalamic).manifest.count() == 1072);
}

TEST_CASE("empty directory is an empty-dataset error") {
  const auto dir = testing::scratch_dir("ds_empty");
  CHECK_THROWS_AS(scan_dataset(dir, Plane::Other), EmptyDatasetError);
  CHECK_THROWS_AS(scan_dataset(dir / "missing", Plane::Other), LoadError);
}

TEST_CASE("manifest file round-trips") {
  const auto dir = testing::scratch_dir("ds_manifest");
  testing::write_phantoms(dir / "imgs", 4, 16, 3);
  const auto m = scan_dataset(dir / "imgs", Plane::Other).manifest;
  save_manifest(m, dir / "m.tsv");
  const auto back = load_manifest(dir / "m.tsv");
  REQUIRE(back.count() == m.count());
  CHECK(back.checksum == m.checksum);
  for (std::size_t i = 0; i < m.count(); ++i) {
    CHECK(back.records[i].path == m.records[i].path);
    CHECK(back.records[i].width == m.records[i].width);
  }
  std::ifstream in(dir / "m.tsv");
  std::string line;
  std::getline(in, line);
  CHECK(line == m.records[0].path.generic_string() + "\tother\t16\t16");
}

TEST_CASE("plane names parse and infer from paths") {
  CHECK(parse_plane("trans-cerebellum") == Plane::TransCerebellum);
  CHECK(parse_plane("trans-thalamic") == Plane::TransThalamic);
  CHECK_THROWS_AS(parse_plane("coronal"), ConfigError);
  CHECK(infer_plane("data/Trans-Cerebellum/a.png") == Plane::TransCerebellum);
  CHECK(infer_plane("data/thalamic/a.png") == Plane::TransThalamic);
  CHECK(infer_plane("data/other/a.png") == Plane::Other);
}

TEST_CASE("identity augmentation is exact") {
  const auto batch = testing::sector_phantoms(4, 16, 5);
  CHECK(torch::equal(augment(batch, AugmentConfig::identity(), 11), batch));
}

TEST_CASE("flip is an involution and mirrors columns") {
  const auto batch = testing::sector_phantoms(3, 16, 6);
  const AugmentConfig flip(1.0, {1.0, 1.0}, {0.0, 0.0});
  const auto once = augment(batch, flip, 1);
  CHECK(torch::equal(once, torch::flip(batch, {3})));
  CHECK(torch::equal(augment(once, flip, 99), batch));
}

TEST_CASE("random augmentation is a pure function of the seed") {
  const auto batch = testing::sector_phantoms(4, 16, 7);
  const AugmentConfig cfg(0.5, {0.9, 1.1}, {-10.0, 10.0});
  const auto a = augment(batch, cfg, 7);
  const auto b = augment(batch, cfg, 7);
  CHECK(torch::equal(a, b));
  CHECK_FALSE(torch::equal(a, augment(batch, cfg, 8)));
  CHECK(a.min().item<float>() >= -1.0f);
  CHECK(a.max().item<float>() <= 1.0f);
}

TEST_CASE("augment config rejects invalid ranges") {
  CHECK_THROWS_AS(AugmentConfig(1.5, {1.0, 1.0}, {0.0, 0.0}), ConfigError);
  CHECK_THROWS_AS(AugmentConfig(0.5, {0.0, 1.0}, {0.0, 0.0}), ConfigError);
  CHECK_THROWS_AS(AugmentConfig(0.5, {1.2, 1.1}, {0.0, 0.0}), ConfigError);
  CHECK_THROWS_AS(AugmentConfig(0.5, {1.0, 1.0}, {5.0, -5.0}), ConfigError);
}

TEST_CASE("one epoch of 408 images in batches of 16") {
  const auto data = torch::arange(408, torch::kFloat32).view({408, 1, 1, 1}).expand({408, 1, 8, 8}).contiguous();
  BatchIterator it(data, 16, 42);
  CHECK(it.batch_count() == 26);
  std::map<std::int64_t, int> sizes;
  std::multiset<std::size_t> seen;
  while (auto b = it.next()) {
    sizes[b->images.size(0)]++;
    for (std::size_t k = 0; k < b->indices.size(); ++k) {
      seen.insert(b->indices[k]);
      CHECK(b->images[static_cast<std::int64_t>(k)][0][0][0].item<float>() == static_cast<float>(b->indices[k]));
    }
  }
  CHECK(sizes[16] == 25);
  CHECK(sizes[8] == 1);
  CHECK(sizes.size() == 2);
  CHECK(seen.size() == 408);
  CHECK(std::set<std::size_t>(seen.begin(), seen.end()).size() == 408);

  BatchIterator unit(data, 1, 42);
  CHECK(unit.batch_count() == 408);
  std::size_t n = 0;
  while (unit.next()) ++n;
  CHECK(n == 408);
}

TEST_CASE("batch order is seed-determined") {
  CHECK(shuffled_order(408, 3) == shuffled_order(408, 3));
  CHECK(shuffled_order(408, 3) != shuffled_order(408, 4));
  CHECK(shuffled_order(2, 1) != shuffled_order(2, 2));
  auto sorted = shuffled_order(50, 9);
  std::sort(sorted.begin(), sorted.end());
  for (std::size_t i = 0; i < sorted.size(); ++i) CHECK(sorted[i] == i);
}

TEST_CASE("lazy batches load every record once") {
  const auto dir = testing::scratch_dir("ds_lazy");
  testing::write_phantoms(dir, 5, 16, 8);
  const auto m = scan_dataset(dir, Plane::Other).manifest;
  auto it = make_batches(m, 2, 8, 1, 3);
  std::multiset<std::size_t> seen;
  while (auto b = it.next()) {
    CHECK(b->images.size(1) == 1);
    CHECK(b->images.size(2) == 8);
    seen.insert(b->indices.begin(), b->indices.end());
  }
  CHECK(seen == std::multiset<std::size_t>{0, 1, 2, 3, 4});
}

}  // TEST_SUITE
