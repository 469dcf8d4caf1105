#include "usgen/trainer.hpp"

#include "usgen/diffusion.hpp"
#include "usgen/superres.hpp"
#include "usgen/tbgan.hpp"

#include <algorithm>
#include <chrono>
#include <cmath>
#include <cstdio>
#include <ctime>
#include <fstream>
#include <functional>
#include <iostream>
#include <limits>
#include <memory>
#include <sstream>

namespace usgen::trainer {
namespace {

constexpr std::uint64_t kInitTag = 0x1417;
constexpr std::uint64_t kStageTag = 0x57a9;
constexpr std::uint64_t kEvalTag = 0xe7a1;
constexpr std::uint64_t kFigureTag = 0xf160;
constexpr std::uint64_t kReferenceTag = 0xcdf0;
constexpr std::int64_t kSynthChunk = 32;
constexpr std::int64_t kFigureBatch = 8;

std::string timestamp() {
  const auto now = std::chrono::system_clock::to_time_t(std::chrono::system_clock::now());
  std::tm tm{};
  gmtime_r(&now, &tm);
  char buf[32];
  std::strftime(buf, sizeof buf, "%Y-%m-%dT%H:%M:%SZ", &tm);
  return buf;
}

std::string numbered(const std::string& tag, std::int64_t i, std::int64_t count) {
  const int width = std::max<int>(3, static_cast<int>(std::to_string(std::max<std::int64_t>(count - 1, 0)).size()));
  char buf[32];
  std::snprintf(buf, sizeof buf, "%0*lld", width, static_cast<long long>(i));
  return tag + "_" + buf + ".png";
}

std::string fmt9(double v) {
  char buf[40];
  std::snprintf(buf, sizeof buf, "%.9g", v);
  return buf;
}

std::map<std::string, std::string> with_prefix(const std::map<std::string, std::string>& m,
                                               const std::string& prefix) {
  std::map<std::string, std::string> out;
  for (const auto& [k, v] : m) {
    if (k.rfind(prefix, 0) == 0) out.emplace(k, v);
  }
  return out;
}

nlohmann::json trace_json(const TraceTable& t) { return {{"columns", t.columns}, {"rows", t.rows}}; }

TraceTable trace_from_json(const nlohmann::json& j) {
  return {j.at("columns").get<std::vector<std::string>>(),
          j.at("rows").get<std::vector<std::vector<double>>>()};
}

nlohmann::json fid_json(const metrics::FIDReport& r) {
  return {{"epoch", r.epoch},           {"model_tag", r.model_tag},
          {"n_real", r.n_real},         {"n_fake", r.n_fake},
          {"feature_dim", r.feature_dim}, {"extractor_checksum", r.extractor_checksum},
          {"fid", r.fid}};
}

metrics::FIDReport fid_from_json(const nlohmann::json& j) {
  metrics::FIDReport r;
  r.epoch = j.at("epoch").get<std::int64_t>();
  r.model_tag = j.at("model_tag").get<std::string>();
  r.n_real = j.at("n_real").get<std::int64_t>();
  r.n_fake = j.at("n_fake").get<std::int64_t>();
  r.feature_dim = j.at("feature_dim").get<int>();
  r.extractor_checksum = j.at("extractor_checksum").get<std::string>();
  r.fid = j.at("fid").get<double>();
  return r;
}

// ---------------------------------------------------------------------------
// Models

struct Models {
  TrainConfig cfg;
  diffusion::UNet unet{nullptr};
  diffusion::DiffusionSchedule schedule;
  superres::SRGenerator sr_g{nullptr};
  superres::SRDiscriminator sr_d{nullptr};
  tbgan::StyleGenerator g{nullptr};
  tbgan::ConvDiscriminator d{nullptr};
  std::map<std::string, std::string> architecture;
};

Models build_models(const TrainConfig& cfg) {
  Models m;
  m.cfg = cfg;
  auto seed_init = [&](std::uint64_t k) {
    torch::manual_seed(derive_seed(cfg.seed, {kInitTag, k}));
  };
  if (cfg.pipeline == Pipeline::Dsr) {
    const auto& d = cfg.dsr;
    diffusion::UNetConfig ucfg = d.preset == "tiny" ? diffusion::UNetConfig::tiny(d.resolution, 1)
                                                    : diffusion::UNetConfig{};
    ucfg.image_size = d.resolution;
    const auto scfg = d.preset == "tiny" ? superres::SRConfig::tiny(1) : superres::SRConfig{};
    m.schedule = diffusion::build_schedule(d.timesteps, d.beta_start, d.beta_end);
    seed_init(1);
    m.unet = diffusion::UNet(ucfg);
    seed_init(2);
    m.sr_g = superres::SRGenerator(scfg);
    seed_init(3);
    m.sr_d = superres::SRDiscriminator(scfg);
    m.architecture = ucfg.echo();
    for (const auto& kv : scfg.echo()) m.architecture.insert(kv);
    m.architecture["schedule.timesteps"] = std::to_string(d.timesteps);
  } else {
    auto gcfg = cfg.tbgan.preset == "tiny" ? tbgan::StyleGeneratorConfig::tiny(1)
                                           : tbgan::StyleGeneratorConfig{};
    gcfg.resolution = cfg.tbgan.resolution;
    seed_init(4);
    m.g = tbgan::StyleGenerator(gcfg);
    seed_init(5);
    m.d = tbgan::ConvDiscriminator(gcfg);
    m.architecture = gcfg.echo();
  }
  for (auto* mod : std::initializer_list<torch::nn::Module*>{
           m.unet ? m.unet.get() : nullptr, m.sr_g ? m.sr_g.get() : nullptr,
           m.sr_d ? m.sr_d.get() : nullptr, m.g ? m.g.get() : nullptr, m.d ? m.d.get() : nullptr}) {
    if (mod) mod->eval();
  }
  return m;
}

ImageBatch sample_diffusion(Models& m, std::int64_t count, std::uint64_t seed) {
  auto model = diffusion::as_noise_model(m.unet);
  std::vector<torch::Tensor> parts;
  for (std::int64_t start = 0, c = 0; start < count; start += kSynthChunk, ++c) {
    const auto len = std::min(kSynthChunk, count - start);
    parts.push_back(diffusion::sample(model, m.schedule, len, m.cfg.dsr.resolution, 1,
                                      derive_seed(seed, {static_cast<std::uint64_t>(c)})));
  }
  return torch::cat(parts, 0);
}

ImageBatch super_resolve(Models& m, const ImageBatch& low) {
  torch::NoGradGuard no_grad;
  std::vector<torch::Tensor> parts;
  for (std::int64_t start = 0; start < low.size(0); start += kSynthChunk) {
    parts.push_back(superres::sr_generate(m.sr_g, low.narrow(0, start, std::min(kSynthChunk, low.size(0) - start))));
  }
  return torch::cat(parts, 0).clamp(-1.0, 1.0);
}

ImageBatch sample_dsr(Models& m, std::int64_t count, std::uint64_t seed, const imageops::IntensityCDF* cdf,
                      bool super) {
  auto x = sample_diffusion(m, count, seed);
  if (cdf) x = imageops::histogram_match(x, *cdf);
  return super ? super_resolve(m, x) : x;
}

ImageBatch sample_tbgan(Models& m, std::int64_t count, std::uint64_t seed) {
  torch::NoGradGuard no_grad;
  std::vector<torch::Tensor> parts;
  const int latent_dim = m.g->config().latent_dim;
  for (std::int64_t start = 0, c = 0; start < count; start += kSynthChunk, ++c) {
    const auto len = std::min(kSynthChunk, count - start);
    const auto cs = static_cast<std::uint64_t>(c);
    const auto z = tbgan::sample_latents(len, latent_dim, derive_seed(seed, {cs, 0}));
    parts.push_back(tbgan::generate(m.g, z, derive_seed(seed, {cs, 1})));
  }
  return torch::cat(parts, 0);
}

std::vector<fs::path> save_images(const ImageBatch& images, std::int64_t count, const std::string& tag,
                                  const fs::path& dir) {
  std::vector<fs::path> files;
  const auto n = std::min<std::int64_t>(count, images.size(0));
  for (std::int64_t i = 0; i < n; ++i) {
    files.push_back(dir / numbered(tag, i, n));
    dataset::save_png(images, i, files.back());
  }
  return files;
}

fs::path save_grid(const ImageBatch& images, const fs::path& file) {
  const auto n = images.size(0);
  const auto cols = static_cast<std::int64_t>(std::ceil(std::sqrt(static_cast<double>(n))));
  dataset::save_png(tile_grid(images, cols), 0, file);
  return file;
}

// ---------------------------------------------------------------------------
// One training run

struct Stage {
  std::string name;
  std::string fid_tag;
  std::int64_t epochs = 0;
  std::vector<std::string> columns;
  std::function<std::vector<double>()> train;
  std::function<std::int64_t()> epoch;
  std::function<void(ModelCheckpoint&)> save;
  std::function<void(const ModelCheckpoint&)> load;
  std::function<ImageBatch(std::int64_t, std::uint64_t)> synth;
  ImageBatch reals;
};

class Run {
 public:
  Run(TrainConfig cfg, fs::path out) : cfg_(std::move(cfg)), out_(std::move(out)) {}

  void execute();
  void fail(const std::exception& e);
  RunArtifacts artifacts;

 private:
  void prepare_data();
  void build_dsr();
  void build_tbgan();
  void resume();
  void train_stage(Stage& st);
  void evaluate(Stage& st, std::int64_t epoch);
  void checkpoint(const std::string& file_stem, const std::string& stage, std::int64_t epoch);
  void write_traces();
  void write_fid();
  void write_figures();
  bool evaluated(const std::string& tag, std::int64_t epoch) const;
  StageOptions stage_options(std::int64_t epochs, EpochUnit unit, std::uint64_t index) const;
  void log(const std::string& msg) const { std::cerr << "[" << current_ << "] " << msg << '\n'; }

  TrainConfig cfg_;
  fs::path out_;
  Models m_;
  std::vector<Stage> stages_;
  dataset::DatasetManifest manifest_;
  std::optional<imageops::IntensityCDF> cdf_;
  std::unique_ptr<metrics::FeatureExtractor> extractor_;
  std::map<std::string, TraceTable> traces_;
  std::vector<metrics::FIDReport> fids_;
  std::string current_ = "setup";

  std::unique_ptr<diffusion::Finetuner> tuner_;
  std::unique_ptr<superres::SRTrainer> sr_;
  std::unique_ptr<tbgan::TBGanTrainer> pre_, fine_;
};

StageOptions Run::stage_options(std::int64_t epochs, EpochUnit unit, std::uint64_t index) const {
  StageOptions o;
  o.epochs = epochs;
  o.unit = unit;
  o.batch_size = static_cast<std::size_t>(cfg_.batch_size);
  o.seed = derive_seed(cfg_.seed, {kStageTag, index});
  o.augment = cfg_.augment();
  o.use_augment = cfg_.augment_enabled;
  return o;
}

void Run::prepare_data() {
  if (!cfg_.manifest.empty()) {
    manifest_ = dataset::load_manifest(cfg_.manifest);
  } else if (!cfg_.data_root.empty()) {
    auto scan = dataset::scan_dataset(cfg_.data_root, cfg_.plane);
    for (const auto& w : scan.warnings) log("skipped " + w);
    manifest_ = std::move(scan.manifest);
  } else {
    throw ConfigError("set data_root or manifest");
  }
  artifacts.manifest = out_ / "manifest.tsv";
  dataset::save_manifest(manifest_, artifacts.manifest);
  log("dataset: " + std::to_string(manifest_.count()) + " images");
}

void Run::build_dsr() {
  const auto& d = cfg_.dsr;
  auto low = dataset::load_all(manifest_, d.resolution, 1);
  auto high = dataset::load_all(manifest_, 2 * d.resolution, 1);
  cdf_ = d.reference_samples == 0
             ? imageops::pooled_cdf(low)
             : imageops::build_reference_pool(manifest_, static_cast<std::size_t>(d.reference_samples),
                                              derive_seed(cfg_.seed, {kReferenceTag}), d.resolution, 1);
  artifacts.reference_cdf = out_ / "reference_cdf.tsv";
  imageops::save_cdf(*cdf_, *artifacts.reference_cdf);

  if (!d.diffusion_init.empty()) {
    const auto init = load_checkpoint(d.diffusion_init);
    require_same_architecture(with_prefix(init.architecture, "unet."), with_prefix(m_.architecture, "unet."));
    load_module(init, "diffusion/model", *m_.unet);
  }

  diffusion::FinetuneOptions fopt;
  fopt.stage = stage_options(cfg_.epochs, cfg_.epoch_unit, 1);
  fopt.adam = {cfg_.lr_generator, cfg_.adam_beta1, cfg_.adam_beta2, 1e-8, 1.0};
  tuner_ = std::make_unique<diffusion::Finetuner>(m_.unet, m_.schedule, fopt, low);

  superres::SRTrainOptions sopt;
  sopt.stage = stage_options(d.sr_epochs, d.sr_epoch_unit, 2);
  sopt.adam_g = {cfg_.lr_generator, cfg_.adam_beta1, cfg_.adam_beta2, 1e-8, 0.0};
  sopt.adam_d = {cfg_.lr_discriminator, cfg_.adam_beta1, cfg_.adam_beta2, 1e-8, 0.0};
  sopt.lambda_adv = d.lambda_adv;
  sr_ = std::make_unique<superres::SRTrainer>(m_.sr_g, m_.sr_d, sopt, high);

  const imageops::IntensityCDF* cdf = d.histmatch ? &*cdf_ : nullptr;
  Stage diff;
  diff.name = "diffusion";
  diff.fid_tag = "dsr-diffusion";
  diff.epochs = cfg_.epochs;
  diff.columns = diffusion::Finetuner::trace_columns();
  diff.train = [this] { return std::vector<double>{tuner_->train_epoch()}; };
  diff.epoch = [this] { return tuner_->epoch(); };
  diff.save = [this](ModelCheckpoint& c) { tuner_->save(c, "diffusion"); };
  diff.load = [this](const ModelCheckpoint& c) { tuner_->load(c, "diffusion"); };
  diff.synth = [this, cdf](std::int64_t n, std::uint64_t s) { return sample_dsr(m_, n, s, cdf, false); };
  diff.reals = low;
  stages_.push_back(std::move(diff));

  Stage srs;
  srs.name = "srgan";
  srs.fid_tag = "dsr";
  srs.epochs = d.sr_epochs;
  srs.columns = superres::SRTrainer::trace_columns();
  srs.train = [this] {
    const auto s = sr_->train_epoch();
    return std::vector<double>{s.g_loss, s.d_loss, s.content};
  };
  srs.epoch = [this] { return sr_->epoch(); };
  srs.save = [this](ModelCheckpoint& c) { sr_->save(c, "srgan"); };
  srs.load = [this](const ModelCheckpoint& c) { sr_->load(c, "srgan"); };
  srs.synth = [this, cdf](std::int64_t n, std::uint64_t s) { return sample_dsr(m_, n, s, cdf, true); };
  srs.reals = high;
  stages_.push_back(std::move(srs));
}

void Run::build_tbgan() {
  const auto& t = cfg_.tbgan;
  const int res = t.resolution;
  auto data = dataset::load_all(manifest_, res, 1);

  tbgan::TBGanTrainOptions base;
  base.adam_g = {cfg_.lr_generator, cfg_.adam_beta1, cfg_.adam_beta2, 1e-8, 0.0};
  base.adam_d = {cfg_.lr_discriminator, cfg_.adam_beta1, cfg_.adam_beta2, 1e-8, 0.0};
  base.losses.policy = tbgan::DiffAugPolicy::parse(t.diffaug, t.translation_ratio, t.cutout_ratio);
  base.losses.r1_gamma = t.r1_gamma;
  base.losses.r1_interval = t.r1_interval;
  base.apa_target = t.apa_target;
  base.apa_images = t.apa_kimg * 1000.0;
  base.apa_ema = t.apa_ema;

  auto make_stage = [this](const std::string& name, std::int64_t epochs,
                           std::unique_ptr<tbgan::TBGanTrainer>& holder, ImageBatch reals) {
    Stage st;
    st.name = name;
    st.fid_tag = name;
    st.epochs = epochs;
    st.columns = tbgan::TBGanTrainer::trace_columns();
    st.train = [&holder] {
      const auto s = holder->train_epoch();
      return std::vector<double>{s.g_loss, s.d_loss, s.r1, s.apa_p, s.lambda_r};
    };
    st.epoch = [&holder] { return holder->epoch(); };
    st.save = [&holder, name](ModelCheckpoint& c) { holder->save(c, name); };
    st.load = [&holder, name](const ModelCheckpoint& c) { holder->load(c, name); };
    st.synth = [this](std::int64_t n, std::uint64_t s) { return sample_tbgan(m_, n, s); };
    st.reals = std::move(reals);
    return st;
  };

  if (!t.init_checkpoint.empty()) {
    const auto init = load_checkpoint(t.init_checkpoint);
    require_same_architecture(with_prefix(init.architecture, "tbgan."), with_prefix(m_.architecture, "tbgan."));
    const std::string prefix = init.has("tbgan/g/const_input") ? "tbgan" : "tbgan-pretrain";
    load_module(init, prefix + "/g", *m_.g);
    load_module(init, prefix + "/d", *m_.d);
    log("initial weights from " + t.init_checkpoint);
  } else if (!t.pretrain_root.empty() && t.pretrain_epochs > 0) {
    const auto pre_manifest = dataset::scan_dataset(t.pretrain_root, t.pretrain_plane).manifest;
    auto pre_data = dataset::load_all(pre_manifest, res, 1);
    auto opt = base;
    opt.stage = stage_options(t.pretrain_epochs, cfg_.epoch_unit, 3);
    pre_ = std::make_unique<tbgan::TBGanTrainer>(m_.g, m_.d, opt, pre_data);
    stages_.push_back(make_stage("tbgan-pretrain", t.pretrain_epochs, pre_, pre_data));
  } else {
    log("no pretraining source; transfer stage starts from random weights");
  }

  auto opt = base;
  opt.stage = stage_options(cfg_.epochs, cfg_.epoch_unit, 4);
  fine_ = std::make_unique<tbgan::TBGanTrainer>(m_.g, m_.d, opt, data);
  stages_.push_back(make_stage("tbgan", cfg_.epochs, fine_, data));
}

void Run::resume() {
  const auto ckpt = load_checkpoint(cfg_.resume);
  if (ckpt.pipeline != to_string(cfg_.pipeline)) {
    throw ConfigMismatchError("resume checkpoint is a " + ckpt.pipeline + " run, config is " +
                              to_string(cfg_.pipeline));
  }
  require_same_architecture(ckpt.architecture, m_.architecture);
  for (auto& st : stages_) {
    if (!ckpt.extra.contains("epochs") || !ckpt.extra["epochs"].contains(st.name)) {
      throw ConfigMismatchError("resume checkpoint has no state for stage " + st.name);
    }
    st.load(ckpt);
  }
  if (ckpt.extra.contains("traces")) {
    for (const auto& [stage, j] : ckpt.extra["traces"].items()) traces_[stage] = trace_from_json(j);
  }
  if (ckpt.extra.contains("fid")) {
    for (const auto& j : ckpt.extra["fid"]) fids_.push_back(fid_from_json(j));
  }
  log("resumed from " + cfg_.resume + " (" + ckpt.stage + " epoch " + std::to_string(ckpt.epoch) + ")");
}

void Run::checkpoint(const std::string& file_stem, const std::string& stage, std::int64_t epoch) {
  ModelCheckpoint c;
  c.pipeline = to_string(cfg_.pipeline);
  c.architecture = m_.architecture;
  c.stage = stage;
  c.epoch = epoch;
  c.rng = {cfg_.seed, epoch};
  c.created = timestamp();
  auto persisted = cfg_;
  persisted.resume.clear();
  c.config_text = persisted.to_text();
  for (auto& st : stages_) st.save(c);
  for (const auto& [name, t] : traces_) c.extra["traces"][name] = trace_json(t);
  c.extra["fid"] = nlohmann::json::array();
  for (const auto& r : fids_) c.extra["fid"].push_back(fid_json(r));
  const auto file = out_ / "checkpoints" / (file_stem + ".ckpt");
  save_checkpoint(c, file);
  artifacts.checkpoints.push_back(file);
}

bool Run::evaluated(const std::string& tag, std::int64_t epoch) const {
  return std::any_of(fids_.begin(), fids_.end(), [&](const metrics::FIDReport& r) {
    return r.model_tag == tag && (epoch < 0 || r.epoch == epoch);
  });
}

void Run::evaluate(Stage& st, std::int64_t epoch) {
  const auto seed = derive_seed(cfg_.seed, {kEvalTag});
  const auto fakes = st.synth(cfg_.fid_samples, seed);
  auto report = metrics::fid(st.reals, fakes, *extractor_, cfg_.fid_real_samples,
                             derive_seed(cfg_.seed, {kEvalTag, 1}));
  report.epoch = epoch;
  report.model_tag = st.fid_tag;
  fids_.push_back(report);
  write_fid();
  if (cfg_.samples_save_count > 0) {
    const auto dir = out_ / "samples" / ("epoch_" + std::to_string(epoch));
    save_images(fakes, cfg_.samples_save_count, st.fid_tag, dir);
    const auto shown = fakes.narrow(0, 0, std::min<std::int64_t>(cfg_.samples_save_count, fakes.size(0)));
    artifacts.sample_grids.push_back(save_grid(shown, dir / (st.fid_tag + "_grid.png")));
  }
  log("epoch " + std::to_string(epoch) + " fid(" + st.fid_tag + ") = " + fmt9(report.fid));
}

void Run::train_stage(Stage& st) {
  current_ = st.name;
  auto& trace = traces_[st.name];
  if (trace.columns.empty()) trace.columns = st.columns;
  if (st.epoch() < st.epochs) {
    log("training epochs " + std::to_string(st.epoch() + 1) + ".." + std::to_string(st.epochs));
  }
  while (st.epoch() < st.epochs) {
    const auto start = std::chrono::steady_clock::now();
    auto row = st.train();
    const double wall = std::chrono::duration<double>(std::chrono::steady_clock::now() - start).count();
    const auto e = st.epoch();
    row.insert(row.begin(), static_cast<double>(e));
    row.push_back(wall);
    trace.add(row);
    if (e % cfg_.eval_every == 0) evaluate(st, e);
    if (cfg_.checkpoint_every > 0 && e % cfg_.checkpoint_every == 0) {
      checkpoint(st.name + "_epoch_" + std::to_string(e), st.name, e);
    }
  }
  if (st.epochs > 0 && !evaluated(st.fid_tag, st.epoch())) evaluate(st, st.epoch());
}

void Run::write_traces() {
  artifacts.stage_traces.clear();
  artifacts.traces_csv = out_ / "traces.csv";
  std::ofstream out(artifacts.traces_csv, std::ios::binary);
  if (!out) throw Error("cannot write " + artifacts.traces_csv.string());
  out << "stage,epoch,series,value\n";
  for (const auto& st : stages_) {
    const auto it = traces_.find(st.name);
    if (it == traces_.end()) continue;
    const auto& t = it->second;
    const auto file = out_ / ("traces_" + st.name + ".csv");
    t.write_csv(file);
    artifacts.stage_traces.push_back(file);
    for (const auto& row : t.rows) {
      for (std::size_t c = 1; c < t.columns.size(); ++c) {
        out << st.name << ',' << static_cast<long long>(row[0]) << ',' << t.columns[c] << ','
            << fmt9(row[c]) << '\n';
      }
    }
  }
  artifacts.traces = traces_;
}

void Run::write_fid() {
  artifacts.fid_csv = out_ / "fid.csv";
  fs::remove(artifacts.fid_csv);
  for (const auto& r : fids_) metrics::append_fid_csv(artifacts.fid_csv, r);
  artifacts.fid_reports = fids_;
}

void Run::write_figures() {
  const bool any_rows = std::any_of(traces_.begin(), traces_.end(), [](const auto& kv) { return !kv.second.empty(); });
  if (!any_rows) {
    log("no trace rows; figures skipped");
    return;
  }
  ReportInputs in;
  in.traces = traces_;
  in.fid = fids_;
  const auto& last = stages_.back();
  const auto n = last.reals.size(0);
  const auto k = std::max<std::int64_t>(1, std::min<std::int64_t>(kFigureBatch, n / 2));
  const auto order = dataset::shuffled_order(static_cast<std::size_t>(n), derive_seed(cfg_.seed, {kFigureTag}));
  for (int b = 0; b < 2; ++b) {
    std::vector<std::int64_t> idx;
    for (std::int64_t i = 0; i < k; ++i) idx.push_back(static_cast<std::int64_t>(order[static_cast<std::size_t>((b * k + i) % n)]));
    in.sample_rows.emplace_back("real batch " + std::to_string(b + 1),
                                last.reals.index_select(0, torch::tensor(idx, torch::kLong)));
  }
  for (std::uint64_t b = 0; b < 2; ++b) {
    in.sample_rows.emplace_back("synthetic batch " + std::to_string(b + 1),
                                last.synth(k, derive_seed(cfg_.seed, {kFigureTag, b + 1})));
  }
  artifacts.figures = make_report(in, out_);
}

void Run::execute() {
  use_deterministic_runtime();
  cfg_.validate();
  artifacts.out_dir = out_;
  fs::create_directories(out_ / "checkpoints");
  artifacts.config_copy = out_ / "config.cfg";
  {
    std::ofstream cfg_out(artifacts.config_copy, std::ios::binary);
    cfg_out << cfg_.to_text();
  }
  extractor_ = metrics::make_extractor(cfg_.fid_extractor);
  prepare_data();
  m_ = build_models(cfg_);
  if (cfg_.pipeline == Pipeline::Dsr) {
    build_dsr();
  } else {
    build_tbgan();
  }
  if (!cfg_.resume.empty()) {
    resume();
  } else {
    checkpoint("initial", stages_.front().name, 0);
  }
  for (auto& st : stages_) train_stage(st);
  current_ = "final";
  auto& last = stages_.back();
  if (!evaluated(last.fid_tag, -1)) evaluate(last, last.epoch());
  const bool trained = std::any_of(stages_.begin(), stages_.end(), [](const Stage& s) { return s.epochs > 0; });
  if (trained) checkpoint("final", last.name, last.epoch());
  write_traces();
  write_fid();
  write_figures();
}

void Run::fail(const std::exception& e) {
  try {
    if (!stages_.empty()) write_traces();
  } catch (const std::exception&) {
  }
  const auto file = out_ / "error_report.txt";
  std::ofstream out(file);
  out << "stage: " << current_ << "\nerror: " << e.what() << "\nartifacts:\n";
  std::vector<fs::path> files;
  if (fs::exists(out_)) {
    for (const auto& entry : fs::recursive_directory_iterator(out_)) {
      if (entry.is_regular_file() && entry.path() != file) files.push_back(fs::relative(entry.path(), out_));
    }
  }
  std::sort(files.begin(), files.end());
  for (const auto& f : files) out << "  " << f.generic_string() << '\n';
}

// ---------------------------------------------------------------------------
// Plots

struct Series {
  std::string label;
  std::vector<double> x, y;
};

const char* kPalette[] = {"#1f77b4", "#d62728", "#2ca02c", "#9467bd", "#ff7f0e",
                          "#17becf", "#8c564b", "#e377c2", "#7f7f7f", "#bcbd22"};

std::string xml_escape(const std::string& s) {
  std::string out;
  for (char c : s) {
    switch (c) {
      case '<': out += "&lt;"; break;
      case '>': out += "&gt;"; break;
      case '&': out += "&amp;"; break;
      case '"': out += "&quot;"; break;
      default: out += c;
    }
  }
  return out;
}

void write_plot(const fs::path& file, const std::string& title, const std::string& x_label,
                const std::string& y_label, const std::vector<Series>& series) {
  constexpr double W = 720, H = 420, L = 70, R = 200, T = 40, B = 50;
  double x0 = std::numeric_limits<double>::infinity(), x1 = -x0, y0 = x0, y1 = -x0;
  for (const auto& s : series) {
    for (std::size_t i = 0; i < s.x.size(); ++i) {
      if (!std::isfinite(s.y[i])) continue;
      x0 = std::min(x0, s.x[i]);
      x1 = std::max(x1, s.x[i]);
      y0 = std::min(y0, s.y[i]);
      y1 = std::max(y1, s.y[i]);
    }
  }
  if (!std::isfinite(x0)) x0 = 0, x1 = 1, y0 = 0, y1 = 1;
  if (x1 - x0 < 1e-12) x0 -= 1, x1 += 1;
  if (y1 - y0 < 1e-12) y0 -= 1, y1 += 1;
  auto px = [&](double x) { return L + (x - x0) / (x1 - x0) * (W - L - R); };
  auto py = [&](double y) { return H - B - (y - y0) / (y1 - y0) * (H - T - B); };

  std::ofstream out(file, std::ios::binary);
  if (!out) throw Error("cannot write " + file.string());
  out << "<svg xmlns=\"http://www.w3.org/2000/svg\" width=\"" << W << "\" height=\"" << H
      << "\" font-family=\"sans-serif\" font-size=\"12\">\n"
      << "<rect width=\"100%\" height=\"100%\" fill=\"white\"/>\n"
      << "<text x=\"" << W / 2 << "\" y=\"22\" text-anchor=\"middle\" font-size=\"15\">" << xml_escape(title) << "</text>\n"
      << "<line x1=\"" << L << "\" y1=\"" << H - B << "\" x2=\"" << W - R << "\" y2=\"" << H - B << "\" stroke=\"black\"/>\n"
      << "<line x1=\"" << L << "\" y1=\"" << T << "\" x2=\"" << L << "\" y2=\"" << H - B << "\" stroke=\"black\"/>\n";
  for (int i = 0; i <= 4; ++i) {
    const double xv = x0 + (x1 - x0) * i / 4.0, yv = y0 + (y1 - y0) * i / 4.0;
    out << "<text x=\"" << px(xv) << "\" y=\"" << H - B + 16 << "\" text-anchor=\"middle\">" << fmt9(xv) << "</text>\n"
        << "<text x=\"" << L - 6 << "\" y=\"" << py(yv) + 4 << "\" text-anchor=\"end\">" << fmt9(yv) << "</text>\n";
  }
  out << "<text x=\"" << (L + W - R) / 2 << "\" y=\"" << H - 12 << "\" text-anchor=\"middle\">" << xml_escape(x_label) << "</text>\n"
      << "<text x=\"16\" y=\"" << (T + H - B) / 2 << "\" transform=\"rotate(-90 16 " << (T + H - B) / 2
      << ")\" text-anchor=\"middle\">" << xml_escape(y_label) << "</text>\n";
  for (std::size_t k = 0; k < series.size(); ++k) {
    const auto& s = series[k];
    const char* colour = kPalette[k % std::size(kPalette)];
    std::ostringstream pts;
    for (std::size_t i = 0; i < s.x.size(); ++i) {
      if (std::isfinite(s.y[i])) pts << px(s.x[i]) << ',' << py(s.y[i]) << ' ';
    }
    out << "<polyline class=\"series\" fill=\"none\" stroke=\"" << colour << "\" stroke-width=\"1.5\" points=\""
        << pts.str() << "\"/>\n";
    for (std::size_t i = 0; i < s.x.size(); ++i) {
      if (std::isfinite(s.y[i])) {
        out << "<circle cx=\"" << px(s.x[i]) << "\" cy=\"" << py(s.y[i]) << "\" r=\"2\" fill=\"" << colour << "\"/>\n";
      }
    }
    const double ly = T + 16 * static_cast<double>(k);
    out << "<rect x=\"" << W - R + 12 << "\" y=\"" << ly - 8 << "\" width=\"10\" height=\"10\" fill=\"" << colour << "\"/>\n"
        << "<text class=\"legend\" x=\"" << W - R + 28 << "\" y=\"" << ly + 1 << "\">" << xml_escape(s.label) << "</text>\n";
  }
  out << "</svg>\n";
}

bool is_loss_column(const std::string& c) { return c.find("loss") != std::string::npos || c == "r1"; }

}  // namespace

// ---------------------------------------------------------------------------

std::vector<fs::path> RunArtifacts::all_paths() const {
  std::vector<fs::path> out{config_copy, manifest, traces_csv, fid_csv};
  out.insert(out.end(), checkpoints.begin(), checkpoints.end());
  out.insert(out.end(), stage_traces.begin(), stage_traces.end());
  out.insert(out.end(), sample_grids.begin(), sample_grids.end());
  out.insert(out.end(), figures.begin(), figures.end());
  if (reference_cdf) out.push_back(*reference_cdf);
  return out;
}

RunArtifacts run(const TrainConfig& config, const fs::path& out_dir) {
  Run r(config, out_dir);
  try {
    r.execute();
  } catch (const std::exception& e) {
    r.fail(e);
    throw;
  }
  return r.artifacts;
}

Synthesis synthesize(const ModelCheckpoint& ckpt, std::int64_t count, std::uint64_t seed,
                     bool apply_histmatch, const std::optional<imageops::IntensityCDF>& reference_cdf,
                     const fs::path& out_dir) {
  if (count < 1) throw ShapeError("synthesize: count must be >= 1");
  if (apply_histmatch && !reference_cdf) {
    throw ConfigError("synthesize: histogram matching requested without a reference CDF");
  }
  use_deterministic_runtime();
  const auto cfg = parse_config(ckpt.config_text);
  if (to_string(cfg.pipeline) != ckpt.pipeline) {
    throw ConfigMismatchError("checkpoint pipeline " + ckpt.pipeline + " disagrees with its config");
  }
  Models m = build_models(cfg);
  require_same_architecture(ckpt.architecture, m.architecture);
  Synthesis out;
  if (cfg.pipeline == Pipeline::Dsr) {
    load_module(ckpt, "diffusion/model", *m.unet);
    load_module(ckpt, "srgan/g", *m.sr_g);
    out.images = sample_dsr(m, count, seed, apply_histmatch ? &*reference_cdf : nullptr, true);
  } else {
    load_module(ckpt, "tbgan/g", *m.g);
    out.images = sample_tbgan(m, count, seed);
    if (apply_histmatch) out.images = imageops::histogram_match(out.images, *reference_cdf);
  }
  if (!out_dir.empty()) {
    out.files = save_images(out.images, count, ckpt.pipeline, out_dir);
    out.grid = save_grid(out.images, out_dir / "grid.png");
  }
  return out;
}

ImageBatch tile_grid(const ImageBatch& images, std::int64_t columns, int pad) {
  check_image_batch(images, "tile_grid");
  const auto n = images.size(0), c = images.size(1), h = images.size(2), w = images.size(3);
  if (n == 0 || columns < 1) throw ShapeError("tile_grid: empty batch");
  const auto cols = std::min(columns, n);
  const auto rows = (n + cols - 1) / cols;
  auto grid = torch::full({1, c, rows * (h + pad) + pad, cols * (w + pad) + pad}, -1.0f);
  for (std::int64_t i = 0; i < n; ++i) {
    const auto y = pad + (i / cols) * (h + pad), x = pad + (i % cols) * (w + pad);
    grid[0].narrow(1, y, h).narrow(2, x, w).copy_(images[i].detach().to(torch::kFloat32));
  }
  return grid;
}

std::vector<fs::path> make_report(const ReportInputs& inputs, const fs::path& out_dir) {
  const bool any_rows = std::any_of(inputs.traces.begin(), inputs.traces.end(),
                                    [](const auto& kv) { return !kv.second.empty(); });
  if (!any_rows) throw ShapeError("make_report: no trace rows");
  const auto dir = out_dir / "figures";
  fs::create_directories(dir);
  std::vector<fs::path> files;

  std::vector<Series> losses;
  for (const auto& [stage, t] : inputs.traces) {
    const auto epochs = t.column("epoch");
    for (const auto& c : t.columns) {
      if (is_loss_column(c)) losses.push_back({stage + ":" + c, epochs, t.column(c)});
    }
  }
  files.push_back(dir / "losses.svg");
  write_plot(files.back(), "Training losses", "epoch", "loss", losses);

  std::vector<Series> fid_series;
  for (const auto& r : inputs.fid) {
    auto it = std::find_if(fid_series.begin(), fid_series.end(), [&](const Series& s) { return s.label == r.model_tag; });
    if (it == fid_series.end()) {
      fid_series.push_back({r.model_tag, {}, {}});
      it = std::prev(fid_series.end());
    }
    it->x.push_back(static_cast<double>(r.epoch));
    it->y.push_back(r.fid);
  }
  files.push_back(dir / "fid.svg");
  write_plot(files.back(), "FID", "training epoch", "FID", fid_series);

  if (!inputs.sample_rows.empty()) {
    std::int64_t width = 0;
    for (const auto& [label, batch] : inputs.sample_rows) width = std::max(width, batch.size(0));
    std::vector<torch::Tensor> rows;
    std::ofstream labels(dir / "samples.txt", std::ios::binary);
    for (const auto& [label, batch] : inputs.sample_rows) {
      if (batch.sizes().slice(1) != inputs.sample_rows.front().second.sizes().slice(1)) {
        throw ShapeError("make_report: sample rows differ in image shape");
      }
      auto row = tile_grid(batch, width);
      const auto full = (width) * (batch.size(3) + 2) + 2;
      if (row.size(3) < full) {
        row = torch::constant_pad_nd(row, {0, full - row.size(3)}, -1.0);
      }
      rows.push_back(row);
      labels << label << '\n';
    }
    files.push_back(dir / "samples.png");
    dataset::save_png(torch::cat(rows, 2), 0, files.back());
    files.push_back(dir / "samples.txt");
  }
  return files;
}

std::map<std::string, TraceTable> read_stage_traces(const fs::path& run_dir) {
  std::map<std::string, TraceTable> out;
  for (const auto& entry : fs::directory_iterator(run_dir)) {
    const auto name = entry.path().filename().string();
    if (name.rfind("traces_", 0) == 0 && entry.path().extension() == ".csv") {
      out[name.substr(7, name.size() - 11)] = read_trace_csv(entry.path());
    }
  }
  return out;
}

std::vector<fs::path> report_run(const fs::path& run_dir) {
  const auto cfg = load_config(run_dir / "config.cfg");
  ReportInputs in;
  in.traces = read_stage_traces(run_dir);
  if (fs::exists(run_dir / "fid.csv")) in.fid = metrics::read_fid_csv(run_dir / "fid.csv");

  fs::path ckpt_file = run_dir / "checkpoints" / "final.ckpt";
  if (!fs::exists(ckpt_file)) ckpt_file = run_dir / "checkpoints" / "initial.ckpt";
  if (fs::exists(ckpt_file) && fs::exists(run_dir / "manifest.tsv")) {
    const auto manifest = dataset::load_manifest(run_dir / "manifest.tsv");
    const int size = cfg.pipeline == Pipeline::Dsr ? 2 * cfg.dsr.resolution : cfg.tbgan.resolution;
    const auto reals = dataset::load_all(manifest, size, 1);
    const auto n = reals.size(0);
    const auto k = std::max<std::int64_t>(1, std::min<std::int64_t>(kFigureBatch, n / 2));
    const auto order = dataset::shuffled_order(static_cast<std::size_t>(n), derive_seed(cfg.seed, {kFigureTag}));
    for (int b = 0; b < 2; ++b) {
      std::vector<std::int64_t> idx;
      for (std::int64_t i = 0; i < k; ++i) idx.push_back(static_cast<std::int64_t>(order[static_cast<std::size_t>((b * k + i) % n)]));
      in.sample_rows.emplace_back("real batch " + std::to_string(b + 1), reals.index_select(0, torch::tensor(idx, torch::kLong)));
    }
    const auto ckpt = load_checkpoint(ckpt_file);
    std::optional<imageops::IntensityCDF> cdf;
    const bool match = cfg.pipeline == Pipeline::Dsr && cfg.dsr.histmatch;
    if (match) cdf = imageops::load_cdf(run_dir / "reference_cdf.tsv");
    for (std::uint64_t b = 0; b < 2; ++b) {
      in.sample_rows.emplace_back("synthetic batch " + std::to_string(b + 1),
                                  synthesize(ckpt, k, derive_seed(cfg.seed, {kFigureTag, b + 1}), match, cdf).images);
    }
  }
  return make_report(in, run_dir);
}

}  // namespace usgen::trainer
