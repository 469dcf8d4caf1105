#include "usgen/metrics.hpp"

#include <torch/script.h>

#include <cmath>
#include <fstream>
#include <iomanip>
#include <sstream>

namespace F = torch::nn::functional;

namespace usgen::metrics {
namespace {

constexpr std::int64_t kChunk = 64;

std::uint64_t splitmix(std::uint64_t& state) {
  std::uint64_t z = (state += 0x9e3779b97f4a7c15ULL);
  z = (z ^ (z >> 30)) * 0xbf58476d1ce4e5b9ULL;
  z = (z ^ (z >> 27)) * 0x94d049bb133111ebULL;
  return z ^ (z >> 31);
}

// Box-Muller on splitmix uniforms, so the weights never depend on torch's RNG.
torch::Tensor gaussian_weights(std::vector<std::int64_t> shape, std::uint64_t& state, double scale) {
  auto t = torch::empty(shape, torch::kFloat32);
  float* p = t.data_ptr<float>();
  const auto n = t.numel();
  for (std::int64_t i = 0; i < n; i += 2) {
    const double u1 = (static_cast<double>(splitmix(state) >> 11) + 1.0) * 0x1.0p-53;
    const double u2 = static_cast<double>(splitmix(state) >> 11) * 0x1.0p-53;
    const double r = std::sqrt(-2.0 * std::log(u1));
    p[i] = static_cast<float>(scale * r * std::cos(2.0 * M_PI * u2));
    if (i + 1 < n) p[i + 1] = static_cast<float>(scale * r * std::sin(2.0 * M_PI * u2));
  }
  return t;
}

torch::Tensor resize_square(const torch::Tensor& x, int size) {
  if (x.size(2) == size && x.size(3) == size) return x;
  return F::interpolate(x, F::InterpolateFuncOptions()
                               .size(std::vector<std::int64_t>{size, size})
                               .mode(torch::kBilinear)
                               .align_corners(false)
                               .antialias(x.size(2) > size));
}

std::string file_hash(const std::filesystem::path& file) {
  std::ifstream in(file, std::ios::binary);
  if (!in) throw LoadError("cannot open feature extractor '" + file.string() + "'");
  std::string bytes((std::istreambuf_iterator<char>(in)), std::istreambuf_iterator<char>());
  return fnv1a_hex(bytes.data(), bytes.size());
}

torch::Tensor pick_rows(const torch::Tensor& x, std::int64_t count, std::uint64_t seed) {
  const auto n = x.size(0);
  if (count <= 0 || count >= n) return x;
  auto order = dataset::shuffled_order(static_cast<std::size_t>(n), seed);
  order.resize(static_cast<std::size_t>(count));
  std::vector<std::int64_t> idx(order.begin(), order.end());
  return x.index_select(0, torch::tensor(idx, torch::kLong));
}

FIDReport compare(const torch::Tensor& real_features, const torch::Tensor& fake_features,
                  const FeatureExtractor& e) {
  FIDReport r;
  r.n_real = real_features.size(0);
  r.n_fake = fake_features.size(0);
  r.feature_dim = e.feature_dim();
  r.extractor_checksum = e.checksum();
  r.fid = frechet_distance(gaussian_stats(real_features), gaussian_stats(fake_features));
  return r;
}

}  // namespace

// ---------------------------------------------------------------------------
// Extractors

torch::Tensor FeatureExtractor::extract(const ImageBatch& batch) {
  check_image_batch(batch, "extract_features");
  if (batch.size(0) == 0) throw ShapeError("extract_features: empty batch");
  verify_weights();
  torch::NoGradGuard no_grad;
  std::vector<torch::Tensor> parts;
  for (std::int64_t start = 0; start < batch.size(0); start += kChunk) {
    const auto len = std::min(kChunk, batch.size(0) - start);
    parts.push_back(forward(batch.narrow(0, start, len).to(torch::kFloat32)).to(torch::kFloat64));
  }
  auto features = torch::cat(parts, 0);
  if (features.dim() != 2 || features.size(1) != feature_dim()) {
    throw ShapeError("extractor " + checksum() + " returned " + shape_str(features));
  }
  if (!torch::isfinite(features).all().item<bool>()) {
    throw NumericError("non-finite features from extractor " + name() + " (checksum " + checksum() + ")");
  }
  return features;
}

TinyEncoder::TinyEncoder() {
  std::uint64_t state = kWeightSeed;
  const std::vector<std::array<int, 3>> layers = {{1, 16, 5}, {16, 32, 3}, {32, 64, 3}};
  for (const auto& [in, out, k] : layers) {
    const double scale = std::sqrt(2.0 / (in * k * k));
    weights_.push_back(gaussian_weights({out, in, k, k}, state, scale));
    biases_.push_back(gaussian_weights({out}, state, 0.1));
  }
  checksum_ = weights_hash();
}

std::string TinyEncoder::weights_hash() const {
  std::string acc;
  for (std::size_t i = 0; i < weights_.size(); ++i) {
    for (const auto* t : {&weights_[i], &biases_[i]}) {
      acc.append(reinterpret_cast<const char*>(t->data_ptr<float>()),
                 static_cast<std::size_t>(t->numel()) * sizeof(float));
    }
  }
  return fnv1a_hex(acc.data(), acc.size());
}

void TinyEncoder::verify_weights() const {
  if (weights_hash() != checksum_) {
    throw ChecksumError("tiny encoder weights changed (expected " + checksum_ + ")");
  }
}

torch::Tensor TinyEncoder::forward(const torch::Tensor& batch) {
  auto x = resize_square(batch.mean(1, true), kInputSize);
  for (std::size_t i = 0; i < weights_.size(); ++i) {
    const auto k = weights_[i].size(2);
    x = F::conv2d(x, weights_[i], F::Conv2dFuncOptions().bias(biases_[i]).stride(2).padding(k / 2));
    x = F::leaky_relu(x, F::LeakyReLUFuncOptions().negative_slope(0.2));
  }
  return x.mean({2, 3});
}

struct ScriptedExtractor::Impl {
  torch::jit::script::Module module;
};

ScriptedExtractor::ScriptedExtractor(const std::filesystem::path& file, int input_size)
    : impl_(std::make_unique<Impl>()), file_(file), input_size_(input_size) {
  checksum_ = file_hash(file);
  try {
    impl_->module = torch::jit::load(file.string());
  } catch (const c10::Error& e) {
    throw LoadError("cannot load feature extractor '" + file.string() + "': " + e.what_without_backtrace());
  }
  impl_->module.eval();
  torch::NoGradGuard no_grad;
  auto probe = forward(torch::zeros({1, 1, input_size_, input_size_}));
  if (probe.dim() != 2) throw ShapeError("extractor '" + file.string() + "' must return (N, D)");
  feature_dim_ = static_cast<int>(probe.size(1));
}

ScriptedExtractor::~ScriptedExtractor() = default;

torch::Tensor ScriptedExtractor::forward(const torch::Tensor& batch) {
  auto x = resize_square(batch, input_size_);
  if (x.size(1) == 1) x = x.expand({x.size(0), 3, input_size_, input_size_}).contiguous();
  return impl_->module.forward({x}).toTensor().flatten(1);
}

std::unique_ptr<FeatureExtractor> make_extractor(const std::string& spec) {
  if (spec == "tiny") return std::make_unique<TinyEncoder>();
  if (std::filesystem::exists(spec)) return std::make_unique<ScriptedExtractor>(spec);
  throw ConfigError("unknown feature extractor '" + spec + "' (use 'tiny' or a TorchScript file)");
}

torch::Tensor extract_features(FeatureExtractor& e, const ImageBatch& batch) {
  return e.extract(batch);
}

// ---------------------------------------------------------------------------
// Statistics

GaussianStats gaussian_stats(const Eigen::MatrixXd& features) {
  const auto n = features.rows();
  if (n < 2) throw ShapeError("gaussian_stats needs at least 2 samples, got " + std::to_string(n));
  GaussianStats s;
  s.n = n;
  s.mu = features.colwise().mean().transpose();
  const Eigen::MatrixXd centered = features.rowwise() - s.mu.transpose();
  const Eigen::MatrixXd cov = centered.transpose() * centered / static_cast<double>(n - 1);
  s.sigma = 0.5 * (cov + cov.transpose());
  return s;
}

GaussianStats gaussian_stats(const torch::Tensor& features) {
  if (features.dim() != 2) throw ShapeError("gaussian_stats expects a matrix, got " + shape_str(features));
  const auto f = features.to(torch::kFloat64).contiguous();
  Eigen::Map<const Eigen::Matrix<double, Eigen::Dynamic, Eigen::Dynamic, Eigen::RowMajor>> m(
      f.data_ptr<double>(), f.size(0), f.size(1));
  return gaussian_stats(Eigen::MatrixXd(m));
}

double frechet_distance(const GaussianStats& a, const GaussianStats& b) {
  const auto d = a.mu.size();
  if (d != b.mu.size() || a.sigma.rows() != d || b.sigma.rows() != d) {
    throw ShapeError("frechet_distance: feature dims " + std::to_string(a.mu.size()) + " vs " +
                     std::to_string(b.mu.size()));
  }
  const double mean_term = (a.mu - b.mu).squaredNorm();
  const Eigen::MatrixXd sa0 = 0.5 * (a.sigma + a.sigma.transpose());
  const Eigen::MatrixXd sb0 = 0.5 * (b.sigma + b.sigma.transpose());
  const Eigen::MatrixXd eye = Eigen::MatrixXd::Identity(d, d);

  std::string attempts;
  for (double jitter : {0.0, 1e-6, 1e-5, 1e-4}) {
    const Eigen::MatrixXd sa = sa0 + jitter * eye;
    const Eigen::MatrixXd sb = sb0 + jitter * eye;
    Eigen::SelfAdjointEigenSolver<Eigen::MatrixXd> ea(sa);
    if (ea.info() == Eigen::Success) {
      const Eigen::VectorXd root = ea.eigenvalues().cwiseMax(0.0).cwiseSqrt();
      const Eigen::MatrixXd sqrt_a = ea.eigenvectors() * root.asDiagonal() * ea.eigenvectors().transpose();
      Eigen::MatrixXd inner = sqrt_a * sb * sqrt_a;
      inner = 0.5 * (inner + inner.transpose());
      Eigen::SelfAdjointEigenSolver<Eigen::MatrixXd> ei(inner, Eigen::EigenvaluesOnly);
      if (ei.info() == Eigen::Success) {
        const double tr_sqrt = ei.eigenvalues().cwiseMax(0.0).cwiseSqrt().sum();
        const double value = mean_term + sa0.trace() + sb0.trace() - 2.0 * tr_sqrt;
        if (std::isfinite(value)) return std::max(value, 0.0);
      }
    }
    std::ostringstream note;
    note << (attempts.empty() ? "" : ", ") << jitter;
    attempts += note.str();
  }
  throw NumericError("frechet_distance: no finite result with jitter " + attempts);
}

// ---------------------------------------------------------------------------
// Reports

FIDReport fid(const ImageBatch& real, const ImageBatch& fake, FeatureExtractor& e,
              std::int64_t sample_count, std::uint64_t seed) {
  check_image_batch(real, "fid real set");
  check_image_batch(fake, "fid fake set");
  const auto subset = pick_rows(real, sample_count, seed);
  if (subset.size(0) < 2 || fake.size(0) < 2) {
    throw ShapeError("fid needs at least 2 images on each side");
  }
  return compare(e.extract(subset), e.extract(fake), e);
}

FIDReport fid(const dataset::DatasetManifest& real_manifest, const ImageBatch& fake,
              FeatureExtractor& e, std::int64_t sample_count, std::uint64_t seed) {
  check_image_batch(fake, "fid fake set");
  const auto n = static_cast<std::int64_t>(real_manifest.count());
  if (n < 2) throw EmptyDatasetError("fid needs at least 2 real images");
  auto order = dataset::shuffled_order(static_cast<std::size_t>(n), seed);
  if (sample_count > 0 && sample_count < n) order.resize(static_cast<std::size_t>(sample_count));
  dataset::DatasetManifest subset = real_manifest;
  subset.records.clear();
  for (auto i : order) subset.records.push_back(real_manifest.records[i]);
  const auto real = dataset::load_all(subset, static_cast<int>(fake.size(2)), static_cast<int>(fake.size(1)));
  return fid(real, fake, e, 0, seed);
}

void append_fid_csv(const std::filesystem::path& file, const FIDReport& report) {
  const bool fresh = !std::filesystem::exists(file);
  if (file.has_parent_path()) std::filesystem::create_directories(file.parent_path());
  std::ofstream out(file, std::ios::app);
  if (!out) throw LoadError("cannot write " + file.string());
  if (fresh) {
    out << "# epoch counts training epochs of the stage named by model_tag\n" << kFidCsvHeader << '\n';
  }
  out << report.epoch << ',' << report.model_tag << ',' << report.n_real << ',' << report.n_fake
      << ',' << report.feature_dim << ',' << report.extractor_checksum << ','
      << std::setprecision(17) << report.fid << '\n';
}

std::vector<FIDReport> read_fid_csv(const std::filesystem::path& file) {
  std::ifstream in(file);
  if (!in) throw LoadError("cannot read " + file.string());
  std::vector<FIDReport> rows;
  std::string line;
  while (std::getline(in, line)) {
    if (line.empty() || line[0] == '#' || line == kFidCsvHeader) continue;
    std::stringstream ss(line);
    std::vector<std::string> cells;
    std::string cell;
    while (std::getline(ss, cell, ',')) cells.push_back(cell);
    if (cells.size() != 7) throw LoadError(file.string() + ": malformed row '" + line + "'");
    FIDReport r;
    r.epoch = std::stoll(cells[0]);
    r.model_tag = cells[1];
    r.n_real = std::stoll(cells[2]);
    r.n_fake = std::stoll(cells[3]);
    r.feature_dim = std::stoi(cells[4]);
    r.extractor_checksum = cells[5];
    r.fid = std::stod(cells[6]);
    rows.push_back(r);
  }
  return rows;
}

}  // namespace usgen::metrics
