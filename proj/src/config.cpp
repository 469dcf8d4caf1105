#include "usgen/config.hpp"

#include <charconv>
#include <fstream>
#include <functional>
#include <map>
#include <sstream>

namespace usgen::trainer {
namespace {

std::string trim(std::string_view s) {
  const auto b = s.find_first_not_of(" \t\r");
  if (b == std::string_view::npos) return {};
  const auto e = s.find_last_not_of(" \t\r");
  return std::string(s.substr(b, e - b + 1));
}

template <typename T>
T parse_int(const std::string& key, const std::string& v) {
  T out{};
  const auto [ptr, ec] = std::from_chars(v.data(), v.data() + v.size(), out);
  if (ec != std::errc() || ptr != v.data() + v.size()) {
    throw ConfigError("config key '" + key + "': expected an integer, got '" + v + "'");
  }
  return out;
}

double parse_real(const std::string& key, const std::string& v) {
  std::size_t used = 0;
  double out = 0.0;
  try {
    out = std::stod(v, &used);
  } catch (const std::exception&) {
    used = 0;
  }
  if (used == 0 || used != v.size()) {
    throw ConfigError("config key '" + key + "': expected a number, got '" + v + "'");
  }
  return out;
}

bool parse_bool(const std::string& key, const std::string& v) {
  if (v == "true" || v == "1" || v == "yes" || v == "on") return true;
  if (v == "false" || v == "0" || v == "no" || v == "off") return false;
  throw ConfigError("config key '" + key + "': expected true or false, got '" + v + "'");
}

std::string fmt(double v) {
  std::ostringstream os;
  os.precision(17);
  os << v;
  return os.str();
}

struct Field {
  std::function<void(TrainConfig&, const std::string&, const std::string&)> set;
  std::function<std::string(const TrainConfig&)> get;
};

template <typename T>
Field int_field(T TrainConfig::*m) {
  return {[m](TrainConfig& c, const std::string& k, const std::string& v) { c.*m = parse_int<T>(k, v); },
          [m](const TrainConfig& c) { return std::to_string(c.*m); }};
}
Field real_field(double TrainConfig::*m) {
  return {[m](TrainConfig& c, const std::string& k, const std::string& v) { c.*m = parse_real(k, v); },
          [m](const TrainConfig& c) { return fmt(c.*m); }};
}
Field text_field(std::string TrainConfig::*m) {
  return {[m](TrainConfig& c, const std::string&, const std::string& v) { c.*m = v; },
          [m](const TrainConfig& c) { return c.*m; }};
}
Field bool_field(bool TrainConfig::*m) {
  return {[m](TrainConfig& c, const std::string& k, const std::string& v) { c.*m = parse_bool(k, v); },
          [m](const TrainConfig& c) { return std::string(c.*m ? "true" : "false"); }};
}

// Nested members go through a projection.
template <typename S, typename T>
Field nested_int(S TrainConfig::*outer, T S::*m) {
  return {[=](TrainConfig& c, const std::string& k, const std::string& v) { (c.*outer).*m = parse_int<T>(k, v); },
          [=](const TrainConfig& c) { return std::to_string((c.*outer).*m); }};
}
template <typename S>
Field nested_real(S TrainConfig::*outer, double S::*m) {
  return {[=](TrainConfig& c, const std::string& k, const std::string& v) { (c.*outer).*m = parse_real(k, v); },
          [=](const TrainConfig& c) { return fmt((c.*outer).*m); }};
}
template <typename S>
Field nested_text(S TrainConfig::*outer, std::string S::*m) {
  return {[=](TrainConfig& c, const std::string&, const std::string& v) { (c.*outer).*m = v; },
          [=](const TrainConfig& c) { return (c.*outer).*m; }};
}
template <typename S>
Field nested_bool(S TrainConfig::*outer, bool S::*m) {
  return {[=](TrainConfig& c, const std::string& k, const std::string& v) { (c.*outer).*m = parse_bool(k, v); },
          [=](const TrainConfig& c) { return std::string((c.*outer).*m ? "true" : "false"); }};
}

const std::vector<std::pair<std::string, Field>>& fields() {
  using C = TrainConfig;
  static const std::vector<std::pair<std::string, Field>> table = {
      {"pipeline",
       {[](C& c, const std::string&, const std::string& v) { c.pipeline = parse_pipeline(v); },
        [](const C& c) { return to_string(c.pipeline); }}},
      {"plane",
       {[](C& c, const std::string&, const std::string& v) { c.plane = dataset::parse_plane(v); },
        [](const C& c) { return dataset::to_string(c.plane); }}},
      {"data_root", text_field(&C::data_root)},
      {"manifest", text_field(&C::manifest)},
      {"epochs", int_field(&C::epochs)},
      {"epoch_unit",
       {[](C& c, const std::string&, const std::string& v) { c.epoch_unit = parse_epoch_unit(v); },
        [](const C& c) { return to_string(c.epoch_unit); }}},
      {"batch_size", int_field(&C::batch_size)},
      {"lr_generator", real_field(&C::lr_generator)},
      {"lr_discriminator", real_field(&C::lr_discriminator)},
      {"adam_beta1", real_field(&C::adam_beta1)},
      {"adam_beta2", real_field(&C::adam_beta2)},
      {"seed", int_field(&C::seed)},
      {"eval_every", int_field(&C::eval_every)},
      {"checkpoint_every", int_field(&C::checkpoint_every)},
      {"resume", text_field(&C::resume)},
      {"augment.enabled", bool_field(&C::augment_enabled)},
      {"augment.flip_prob", real_field(&C::augment_flip_prob)},
      {"augment.zoom_min", real_field(&C::augment_zoom_min)},
      {"augment.zoom_max", real_field(&C::augment_zoom_max)},
      {"augment.rotation_min", real_field(&C::augment_rotation_min)},
      {"augment.rotation_max", real_field(&C::augment_rotation_max)},
      {"fid.samples", int_field(&C::fid_samples)},
      {"fid.real_samples", int_field(&C::fid_real_samples)},
      {"fid.extractor", text_field(&C::fid_extractor)},
      {"samples.save_count", int_field(&C::samples_save_count)},
      {"dsr.preset", nested_text(&C::dsr, &DsrConfig::preset)},
      {"dsr.resolution", nested_int(&C::dsr, &DsrConfig::resolution)},
      {"dsr.timesteps", nested_int(&C::dsr, &DsrConfig::timesteps)},
      {"dsr.beta_start", nested_real(&C::dsr, &DsrConfig::beta_start)},
      {"dsr.beta_end", nested_real(&C::dsr, &DsrConfig::beta_end)},
      {"dsr.sr_epochs", nested_int(&C::dsr, &DsrConfig::sr_epochs)},
      {"dsr.sr_epoch_unit",
       {[](C& c, const std::string&, const std::string& v) { c.dsr.sr_epoch_unit = parse_epoch_unit(v); },
        [](const C& c) { return to_string(c.dsr.sr_epoch_unit); }}},
      {"dsr.lambda_adv", nested_real(&C::dsr, &DsrConfig::lambda_adv)},
      {"dsr.histmatch", nested_bool(&C::dsr, &DsrConfig::histmatch)},
      {"dsr.reference_samples", nested_int(&C::dsr, &DsrConfig::reference_samples)},
      {"dsr.diffusion_init", nested_text(&C::dsr, &DsrConfig::diffusion_init)},
      {"tbgan.preset", nested_text(&C::tbgan, &TbganConfig::preset)},
      {"tbgan.resolution", nested_int(&C::tbgan, &TbganConfig::resolution)},
      {"tbgan.pretrain_root", nested_text(&C::tbgan, &TbganConfig::pretrain_root)},
      {"tbgan.pretrain_plane",
       {[](C& c, const std::string&, const std::string& v) { c.tbgan.pretrain_plane = dataset::parse_plane(v); },
        [](const C& c) { return dataset::to_string(c.tbgan.pretrain_plane); }}},
      {"tbgan.pretrain_epochs", nested_int(&C::tbgan, &TbganConfig::pretrain_epochs)},
      {"tbgan.init_checkpoint", nested_text(&C::tbgan, &TbganConfig::init_checkpoint)},
      {"tbgan.r1_gamma", nested_real(&C::tbgan, &TbganConfig::r1_gamma)},
      {"tbgan.r1_interval", nested_int(&C::tbgan, &TbganConfig::r1_interval)},
      {"tbgan.apa_target", nested_real(&C::tbgan, &TbganConfig::apa_target)},
      {"tbgan.apa_kimg", nested_real(&C::tbgan, &TbganConfig::apa_kimg)},
      {"tbgan.apa_ema", nested_real(&C::tbgan, &TbganConfig::apa_ema)},
      {"tbgan.diffaug", nested_text(&C::tbgan, &TbganConfig::diffaug)},
      {"tbgan.translation_ratio", nested_real(&C::tbgan, &TbganConfig::translation_ratio)},
      {"tbgan.cutout_ratio", nested_real(&C::tbgan, &TbganConfig::cutout_ratio)},
  };
  return table;
}

const Field& field(const std::string& key) {
  for (const auto& [name, f] : fields()) {
    if (name == key) return f;
  }
  throw ConfigError("unknown config key '" + key + "'");
}

std::pair<std::string, std::string> split_assignment(std::string_view line, char sep,
                                                     const std::string& where) {
  const auto pos = line.find(sep);
  if (pos == std::string_view::npos) {
    throw ConfigError(where + ": expected key" + sep + "value, got '" + std::string(line) + "'");
  }
  auto key = trim(line.substr(0, pos));
  auto value = trim(line.substr(pos + 1));
  if (key.empty()) throw ConfigError(where + ": empty key");
  return {key, value};
}

}  // namespace

std::string to_string(Pipeline p) { return p == Pipeline::Dsr ? "dsr" : "tbgan"; }

Pipeline parse_pipeline(std::string_view text) {
  if (text == "dsr") return Pipeline::Dsr;
  if (text == "tbgan") return Pipeline::TbGan;
  throw ConfigError("pipeline must be 'dsr' or 'tbgan', got '" + std::string(text) + "'");
}

TrainConfig TrainConfig::defaults(Pipeline pipeline) {
  TrainConfig c;
  c.pipeline = pipeline;
  if (pipeline == Pipeline::TbGan) {
    c.epochs = 200;
    c.lr_generator = 1e-5;
    c.lr_discriminator = 1e-4;
    c.adam_beta1 = 0.0;
    c.adam_beta2 = 0.99;
  }
  return c;
}

dataset::AugmentConfig TrainConfig::augment() const {
  if (!augment_enabled) return dataset::AugmentConfig::identity();
  return {augment_flip_prob, {augment_zoom_min, augment_zoom_max},
          {augment_rotation_min, augment_rotation_max}};
}

void TrainConfig::set(const std::string& key, const std::string& value) {
  field(key).set(*this, key, value);
}

std::string TrainConfig::get(const std::string& key) const { return field(key).get(*this); }

std::vector<std::string> TrainConfig::keys() {
  std::vector<std::string> out;
  for (const auto& entry : fields()) out.push_back(entry.first);
  return out;
}

void TrainConfig::validate() const {
  auto require = [](bool ok, const std::string& what) {
    if (!ok) throw ConfigError("invalid config: " + what);
  };
  require(epochs >= 0, "epochs must be >= 0");
  require(batch_size >= 1, "batch_size must be >= 1");
  require(lr_generator > 0.0 && lr_discriminator > 0.0, "learning rates must be > 0");
  require(adam_beta1 >= 0.0 && adam_beta1 < 1.0 && adam_beta2 >= 0.0 && adam_beta2 < 1.0,
          "adam betas must lie in [0, 1)");
  require(eval_every >= 1, "eval_every must be >= 1");
  require(checkpoint_every >= 0, "checkpoint_every must be >= 0");
  require(fid_samples >= 2, "fid.samples must be >= 2");
  require(fid_real_samples >= 0, "fid.real_samples must be >= 0");
  require(samples_save_count >= 0, "samples.save_count must be >= 0");
  require(dsr.preset == "full" || dsr.preset == "tiny", "dsr.preset must be full or tiny");
  require(tbgan.preset == "full" || tbgan.preset == "tiny", "tbgan.preset must be full or tiny");
  require(dsr.resolution >= 4, "dsr.resolution must be >= 4");
  require(tbgan.resolution >= 4 && (tbgan.resolution & (tbgan.resolution - 1)) == 0,
          "tbgan.resolution must be a power of two");
  require(dsr.sr_epochs >= 0 && tbgan.pretrain_epochs >= 0, "stage epochs must be >= 0");
  require(dsr.timesteps >= 1, "dsr.timesteps must be >= 1");
  require(dsr.reference_samples >= 0, "dsr.reference_samples must be >= 0");
  require(tbgan.r1_gamma >= 0.0 && tbgan.r1_interval >= 1, "tbgan r1 settings out of range");
  require(tbgan.apa_kimg > 0.0 && tbgan.apa_ema >= 0.0 && tbgan.apa_ema < 1.0,
          "tbgan APA settings out of range");
  // Constructing the value objects runs their own range checks.
  (void)augment();
}

std::string TrainConfig::to_text() const {
  std::ostringstream out;
  std::string section;
  for (const auto& [name, f] : fields()) {
    const auto dot = name.find('.');
    const std::string sec = dot == std::string::npos ? "" : name.substr(0, dot);
    if (sec != section) {
      out << "\n[" << sec << "]\n";
      section = sec;
    }
    out << (dot == std::string::npos ? name : name.substr(dot + 1)) << " = " << f.get(*this) << '\n';
  }
  return out.str();
}

TrainConfig parse_config(std::string_view text, const std::vector<std::string>& overrides) {
  std::vector<std::pair<std::string, std::string>> entries;
  std::istringstream in{std::string(text)};
  std::string line, section;
  int lineno = 0;
  while (std::getline(in, line)) {
    ++lineno;
    const auto hash = line.find('#');
    if (hash != std::string::npos) line.erase(hash);
    line = trim(line);
    if (line.empty()) continue;
    const std::string where = "config line " + std::to_string(lineno);
    if (line.front() == '[') {
      if (line.back() != ']') throw ConfigError(where + ": unterminated section header");
      section = trim(std::string_view(line).substr(1, line.size() - 2));
      continue;
    }
    auto [key, value] = split_assignment(line, '=', where);
    entries.emplace_back(section.empty() ? key : section + "." + key, value);
  }
  for (const auto& o : overrides) entries.push_back(split_assignment(o, '=', "override '" + o + "'"));

  Pipeline pipeline = Pipeline::Dsr;
  for (const auto& [k, v] : entries) {
    if (k == "pipeline") pipeline = parse_pipeline(v);
  }
  TrainConfig cfg = TrainConfig::defaults(pipeline);
  for (const auto& [k, v] : entries) cfg.set(k, v);
  cfg.validate();
  return cfg;
}

TrainConfig load_config(const std::filesystem::path& file, const std::vector<std::string>& overrides) {
  std::ifstream in(file);
  if (!in) throw ConfigError("cannot read config file " + file.string());
  std::stringstream buf;
  buf << in.rdbuf();
  return parse_config(buf.str(), overrides);
}

}  // namespace usgen::trainer
