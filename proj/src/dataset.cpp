#include "usgen/dataset.hpp"

#include <opencv2/core.hpp>
#include <opencv2/imgcodecs.hpp>

#include <algorithm>
#include <cctype>
#include <cmath>
#include <fstream>
#include <numbers>
#include <random>
#include <sstream>

namespace fs = std::filesystem;

namespace usgen::dataset {
namespace {

std::string lower(std::string s) {
  std::transform(s.begin(), s.end(), s.begin(),
                 [](unsigned char c) { return static_cast<char>(std::tolower(c)); });
  return s;
}

bool is_image_file(const fs::path& p) {
  static const char* kExt[] = {".png", ".jpg", ".jpeg", ".bmp", ".tif", ".tiff"};
  const std::string ext = lower(p.extension().string());
  return std::any_of(std::begin(kExt), std::end(kExt),
                     [&](const char* e) { return ext == e; });
}

double unit_draw(std::mt19937_64& rng) {
  return static_cast<double>(rng() >> 11) * 0x1.0p-53;
}

double uniform_draw(std::mt19937_64& rng, std::pair<double, double> range) {
  const double u = unit_draw(rng);
  return range.first + (range.second - range.first) * u;
}

// Decoded 8-bit image as planar float channels (gray, or R, G, B).
struct Planes {
  int width = 0;
  int height = 0;
  std::vector<std::vector<float>> channels;
};

cv::Mat read_8bit(const fs::path& path) {
  cv::Mat img = cv::imread(path.string(), cv::IMREAD_UNCHANGED);
  if (img.empty()) throw LoadError("cannot decode image: " + path.string());
  if (img.depth() != CV_8U) {
    throw LoadError("not an 8-bit image: " + path.string());
  }
  if (img.channels() != 1 && img.channels() != 3 && img.channels() != 4) {
    throw LoadError("unsupported channel count in " + path.string());
  }
  return img;
}

// Center-cropped square, converted to the requested channel count.
Planes decode_square(const fs::path& path, int channels) {
  const cv::Mat img = read_8bit(path);
  const int side = std::min(img.cols, img.rows);
  const int x0 = (img.cols - side) / 2;
  const int y0 = (img.rows - side) / 2;
  const int src_ch = img.channels();

  Planes out;
  out.width = side;
  out.height = side;
  out.channels.assign(channels, std::vector<float>(static_cast<std::size_t>(side) * side));
  for (int y = 0; y < side; ++y) {
    const unsigned char* row = img.ptr<unsigned char>(y0 + y);
    for (int x = 0; x < side; ++x) {
      const unsigned char* px = row + static_cast<std::size_t>(x0 + x) * src_ch;
      const std::size_t i = static_cast<std::size_t>(y) * side + x;
      if (src_ch == 1) {
        for (int c = 0; c < channels; ++c) out.channels[c][i] = px[0];
        continue;
      }
      // OpenCV stores BGR(A).
      const int b = px[0], g = px[1], r = px[2];
      if (channels == 1) {
        out.channels[0][i] =
            static_cast<float>(std::lround(0.299 * r + 0.587 * g + 0.114 * b));
      } else {
        out.channels[0][i] = static_cast<float>(r);
        out.channels[1][i] = static_cast<float>(g);
        out.channels[2][i] = static_cast<float>(b);
      }
    }
  }
  return out;
}

// Half-pixel-centred bilinear resize of a square plane. Same-size input is
// reproduced exactly.
std::vector<float> resize_bilinear(const std::vector<float>& src, int side,
                                   int target) {
  if (side == target) return src;
  std::vector<float> dst(static_cast<std::size_t>(target) * target);
  const double scale = static_cast<double>(side) / target;
  auto axis = [&](int d, int& i0, int& i1, float& w) {
    double s = (d + 0.5) * scale - 0.5;
    s = std::clamp(s, 0.0, static_cast<double>(side - 1));
    i0 = static_cast<int>(std::floor(s));
    i1 = std::min(i0 + 1, side - 1);
    w = static_cast<float>(s - i0);
  };
  for (int y = 0; y < target; ++y) {
    int y0, y1;
    float wy;
    axis(y, y0, y1, wy);
    for (int x = 0; x < target; ++x) {
      int x0, x1;
      float wx;
      axis(x, x0, x1, wx);
      const float a = src[static_cast<std::size_t>(y0) * side + x0];
      const float b = src[static_cast<std::size_t>(y0) * side + x1];
      const float c = src[static_cast<std::size_t>(y1) * side + x0];
      const float d = src[static_cast<std::size_t>(y1) * side + x1];
      const float top = a + (b - a) * wx;
      const float bot = c + (d - c) * wx;
      dst[static_cast<std::size_t>(y) * target + x] = top + (bot - top) * wy;
    }
  }
  return dst;
}

int reflect101(int i, int n) {
  if (n == 1) return 0;
  const int period = 2 * (n - 1);
  i = std::abs(i) % period;
  return i >= n ? period - i : i;
}

void check_target(int target_size, int channels) {
  const bool pow2 = target_size >= 8 && (target_size & (target_size - 1)) == 0;
  if (!pow2) {
    throw ShapeError("target size must be a power of two >= 8, got " +
                     std::to_string(target_size));
  }
  if (channels != 1 && channels != 3) {
    throw ShapeError("channels must be 1 or 3, got " + std::to_string(channels));
  }
}

}  // namespace

std::string to_string(Plane plane) {
  switch (plane) {
    case Plane::TransCerebellum: return "trans-cerebellum";
    case Plane::TransThalamic: return "trans-thalamic";
    case Plane::Other: return "other";
  }
  return "other";
}

Plane parse_plane(std::string_view text) {
  const std::string t = lower(std::string(text));
  if (t == "trans-cerebellum") return Plane::TransCerebellum;
  if (t == "trans-thalamic") return Plane::TransThalamic;
  if (t == "other") return Plane::Other;
  throw ConfigError("unknown plane '" + std::string(text) +
                    "' (expected trans-cerebellum, trans-thalamic or other)");
}

Plane infer_plane(const fs::path& path) {
  const std::string p = lower(path.generic_string());
  const bool cerebellum = p.find("cerebell") != std::string::npos;
  const bool thalamic = p.find("thalam") != std::string::npos;
  if (cerebellum && !thalamic) return Plane::TransCerebellum;
  if (thalamic && !cerebellum) return Plane::TransThalamic;
  if (cerebellum && thalamic) {
    // The deepest mention wins.
    return p.rfind("cerebell") > p.rfind("thalam") ? Plane::TransCerebellum
                                                   : Plane::TransThalamic;
  }
  return Plane::Other;
}

std::string manifest_checksum(const std::vector<ImageRecord>& records) {
  std::string text;
  for (const auto& r : records) {
    text += r.path.generic_string() + '\t' + to_string(r.plane) + '\t' +
            std::to_string(r.width) + '\t' + std::to_string(r.height) + '\n';
  }
  return fnv1a_hex(text.data(), text.size());
}

ScanResult scan_dataset(const fs::path& root, Plane plane) {
  if (!fs::is_directory(root)) {
    throw LoadError("dataset root is not a directory: " + root.string());
  }
  std::vector<fs::path> files;
  for (const auto& entry : fs::recursive_directory_iterator(root)) {
    if (entry.is_regular_file() && is_image_file(entry.path())) {
      files.push_back(entry.path());
    }
  }
  std::sort(files.begin(), files.end(), [](const fs::path& a, const fs::path& b) {
    return a.generic_string() < b.generic_string();
  });

  ScanResult result;
  result.manifest.plane = plane;
  for (const auto& f : files) {
    const Plane label = infer_plane(f);
    if (plane != Plane::Other && label != plane) continue;
    cv::Mat img;
    try {
      img = read_8bit(f);
    } catch (const LoadError& e) {
      result.warnings.emplace_back(e.what());
      continue;
    }
    result.manifest.records.push_back({f, label, img.cols, img.rows});
  }
  if (result.manifest.records.empty()) {
    throw EmptyDatasetError("no readable " + to_string(plane) + " images under " +
                            root.string());
  }
  result.manifest.checksum = manifest_checksum(result.manifest.records);
  return result;
}

void save_manifest(const DatasetManifest& manifest, const fs::path& file) {
  if (file.has_parent_path()) fs::create_directories(file.parent_path());
  std::ofstream out(file, std::ios::binary);
  if (!out) throw Error("cannot write manifest: " + file.string());
  for (const auto& r : manifest.records) {
    out << r.path.generic_string() << '\t' << to_string(r.plane) << '\t'
        << r.width << '\t' << r.height << '\n';
  }
}

DatasetManifest load_manifest(const fs::path& file) {
  std::ifstream in(file, std::ios::binary);
  if (!in) throw LoadError("cannot read manifest: " + file.string());
  DatasetManifest m;
  std::string line;
  std::size_t lineno = 0;
  while (std::getline(in, line)) {
    ++lineno;
    if (line.empty()) continue;
    std::vector<std::string> cols;
    std::stringstream ss(line);
    std::string col;
    while (std::getline(ss, col, '\t')) cols.push_back(col);
    if (cols.size() != 4) {
      throw LoadError(file.string() + ":" + std::to_string(lineno) +
                      ": expected 4 tab-separated columns");
    }
    ImageRecord r{cols[0], parse_plane(cols[1]), std::stoi(cols[2]), std::stoi(cols[3])};
    if (r.width < 1 || r.height < 1) {
      throw LoadError(file.string() + ":" + std::to_string(lineno) + ": bad image size");
    }
    m.records.push_back(std::move(r));
  }
  if (m.records.empty()) throw EmptyDatasetError("empty manifest: " + file.string());
  const Plane first = m.records.front().plane;
  const bool uniform = std::all_of(m.records.begin(), m.records.end(),
                                   [&](const ImageRecord& r) { return r.plane == first; });
  m.plane = uniform ? first : Plane::Other;
  m.checksum = manifest_checksum(m.records);
  return m;
}

float normalize(std::uint8_t value) {
  return static_cast<float>(value) / 255.0f * 2.0f - 1.0f;
}

std::uint8_t denormalize(float value) {
  const float v = std::round((value + 1.0f) * 0.5f * 255.0f);
  return static_cast<std::uint8_t>(std::clamp(v, 0.0f, 255.0f));
}

ImageBatch load_image_file(const fs::path& path, int target_size, int channels) {
  check_target(target_size, channels);
  const Planes planes = decode_square(path, channels);
  auto out = torch::empty({1, channels, target_size, target_size});
  float* dst = out.data_ptr<float>();
  const std::size_t plane_size = static_cast<std::size_t>(target_size) * target_size;
  for (int c = 0; c < channels; ++c) {
    const auto resized = resize_bilinear(planes.channels[c], planes.width, target_size);
    for (std::size_t i = 0; i < plane_size; ++i) {
      dst[c * plane_size + i] = resized[i] / 255.0f * 2.0f - 1.0f;
    }
  }
  return out;
}

ImageBatch load_image(const ImageRecord& record, int target_size, int channels) {
  return load_image_file(record.path, target_size, channels);
}

ImageBatch load_all(const DatasetManifest& manifest, int target_size, int channels) {
  std::vector<torch::Tensor> images;
  images.reserve(manifest.count());
  for (const auto& r : manifest.records) {
    images.push_back(load_image(r, target_size, channels));
  }
  if (images.empty()) throw EmptyDatasetError("manifest has no records");
  return torch::cat(images, 0);
}

void save_png(const ImageBatch& batch, std::int64_t index, const fs::path& file) {
  check_image_batch(batch, "save_png");
  const auto img = batch[index].detach().to(torch::kFloat32).contiguous();
  const int c = static_cast<int>(img.size(0));
  const int h = static_cast<int>(img.size(1));
  const int w = static_cast<int>(img.size(2));
  if (c != 1 && c != 3) throw ShapeError("save_png: 1 or 3 channels expected");
  cv::Mat mat(h, w, c == 1 ? CV_8UC1 : CV_8UC3);
  const float* src = img.data_ptr<float>();
  const std::size_t plane = static_cast<std::size_t>(h) * w;
  for (int y = 0; y < h; ++y) {
    auto* row = mat.ptr<unsigned char>(y);
    for (int x = 0; x < w; ++x) {
      const std::size_t i = static_cast<std::size_t>(y) * w + x;
      if (c == 1) {
        row[x] = denormalize(src[i]);
      } else {
        row[3 * x + 0] = denormalize(src[2 * plane + i]);
        row[3 * x + 1] = denormalize(src[plane + i]);
        row[3 * x + 2] = denormalize(src[i]);
      }
    }
  }
  if (file.has_parent_path()) fs::create_directories(file.parent_path());
  if (!cv::imwrite(file.string(), mat)) {
    throw Error("cannot write image: " + file.string());
  }
}

AugmentConfig::AugmentConfig(double flip_prob, std::pair<double, double> zoom_range,
                             std::pair<double, double> rotation_range_deg)
    : flip_prob_(flip_prob), zoom_(zoom_range), rotation_(rotation_range_deg) {
  if (!(flip_prob >= 0.0 && flip_prob <= 1.0)) {
    throw ConfigError("augment flip probability must lie in [0, 1]");
  }
  if (!(zoom_.first > 0.0 && zoom_.first <= zoom_.second)) {
    throw ConfigError("augment zoom range must satisfy 0 < min <= max");
  }
  if (!(rotation_.first <= rotation_.second)) {
    throw ConfigError("augment rotation range must satisfy min <= max");
  }
}

ImageBatch augment(const ImageBatch& batch, const AugmentConfig& cfg,
                   std::uint64_t seed) {
  check_image_batch(batch, "augment");
  if (batch.size(0) == 0) throw ShapeError("augment: empty batch");
  auto src = batch.detach().to(torch::kFloat32).contiguous();
  auto out = src.clone();
  const auto n = src.size(0);
  const int channels = static_cast<int>(src.size(1));
  const int h = static_cast<int>(src.size(2));
  const int w = static_cast<int>(src.size(3));
  const std::size_t plane = static_cast<std::size_t>(h) * w;

  for (std::int64_t i = 0; i < n; ++i) {
    std::mt19937_64 rng(derive_seed(seed, {static_cast<std::uint64_t>(i)}));
    const bool flip = unit_draw(rng) < cfg.flip_prob();
    const double scale = uniform_draw(rng, cfg.zoom_range());
    const double angle = uniform_draw(rng, cfg.rotation_range_deg()) *
                         std::numbers::pi / 180.0;

    float* img = out[i].data_ptr<float>();
    if (flip) {
      for (int c = 0; c < channels; ++c) {
        for (int y = 0; y < h; ++y) {
          float* row = img + c * plane + static_cast<std::size_t>(y) * w;
          std::reverse(row, row + w);
        }
      }
    }
    if (scale == 1.0 && angle == 0.0) continue;

    std::vector<float> staged(img, img + channels * plane);
    const double cx = (w - 1) * 0.5;
    const double cy = (h - 1) * 0.5;
    const double cs = std::cos(angle);
    const double sn = std::sin(angle);
    for (int y = 0; y < h; ++y) {
      for (int x = 0; x < w; ++x) {
        // Inverse map: undo rotation, then undo zoom.
        const double dx = x - cx;
        const double dy = y - cy;
        const double sx = cx + (cs * dx + sn * dy) / scale;
        const double sy = cy + (-sn * dx + cs * dy) / scale;
        const int x0 = static_cast<int>(std::floor(sx));
        const int y0 = static_cast<int>(std::floor(sy));
        const float fx = static_cast<float>(sx - x0);
        const float fy = static_cast<float>(sy - y0);
        const int xa = reflect101(x0, w), xb = reflect101(x0 + 1, w);
        const int ya = reflect101(y0, h), yb = reflect101(y0 + 1, h);
        for (int c = 0; c < channels; ++c) {
          const float* p = staged.data() + c * plane;
          const float a = p[static_cast<std::size_t>(ya) * w + xa];
          const float b = p[static_cast<std::size_t>(ya) * w + xb];
          const float cc = p[static_cast<std::size_t>(yb) * w + xa];
          const float d = p[static_cast<std::size_t>(yb) * w + xb];
          const float top = a + (b - a) * fx;
          const float bot = cc + (d - cc) * fx;
          img[c * plane + static_cast<std::size_t>(y) * w + x] = top + (bot - top) * fy;
        }
      }
    }
  }
  return out;
}

std::vector<std::size_t> shuffled_order(std::size_t n, std::uint64_t seed) {
  std::vector<std::size_t> order(n);
  for (std::size_t i = 0; i < n; ++i) order[i] = i;
  std::mt19937_64 rng(derive_seed(seed, {}));
  for (std::size_t i = n; i > 1; --i) {
    const std::size_t j = static_cast<std::size_t>(rng() % i);
    std::swap(order[i - 1], order[j]);
  }
  return order;
}

BatchIterator::BatchIterator(DatasetManifest manifest, std::size_t batch_size,
                             int target_size, int channels,
                             std::uint64_t shuffle_seed)
    : manifest_(std::move(manifest)),
      batch_size_(batch_size),
      target_size_(target_size),
      channels_(channels) {
  if (batch_size_ < 1) throw ConfigError("batch size must be >= 1");
  check_target(target_size, channels);
  order_ = shuffled_order(manifest_->count(), shuffle_seed);
}

BatchIterator::BatchIterator(ImageBatch preloaded, std::size_t batch_size,
                             std::uint64_t shuffle_seed)
    : preloaded_(std::move(preloaded)), batch_size_(batch_size) {
  if (batch_size_ < 1) throw ConfigError("batch size must be >= 1");
  check_image_batch(preloaded_, "BatchIterator");
  order_ = shuffled_order(static_cast<std::size_t>(preloaded_.size(0)), shuffle_seed);
}

std::size_t BatchIterator::batch_count() const {
  return (order_.size() + batch_size_ - 1) / batch_size_;
}

std::optional<Batch> BatchIterator::next() {
  if (cursor_ >= order_.size()) return std::nullopt;
  const std::size_t end = std::min(cursor_ + batch_size_, order_.size());
  Batch batch;
  batch.indices.assign(order_.begin() + cursor_, order_.begin() + end);
  cursor_ = end;
  if (preloaded_.defined()) {
    std::vector<std::int64_t> idx(batch.indices.begin(), batch.indices.end());
    batch.images = preloaded_.index_select(0, torch::tensor(idx, torch::kLong));
  } else {
    std::vector<torch::Tensor> images;
    for (std::size_t k : batch.indices) {
      images.push_back(load_image(manifest_->records[k], target_size_, channels_));
    }
    batch.images = torch::cat(images, 0);
  }
  return batch;
}

BatchIterator make_batches(const DatasetManifest& manifest, std::size_t batch_size,
                           int target_size, int channels, std::uint64_t shuffle_seed) {
  return BatchIterator(manifest, batch_size, target_size, channels, shuffle_seed);
}

}  // namespace usgen::dataset
