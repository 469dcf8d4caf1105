#pragma once

#include "usgen/common.hpp"
#include "usgen/dataset.hpp"
#include "usgen/training.hpp"

#include <filesystem>
#include <string>
#include <string_view>
#include <vector>

namespace usgen::trainer {

enum class Pipeline { Dsr, TbGan };

std::string to_string(Pipeline p);
Pipeline parse_pipeline(std::string_view text);

struct DsrConfig {
  std::string preset = "full";  // full | tiny
  int resolution = 128;         // diffusion output; the SR stage doubles it
  std::int64_t timesteps = 1000;
  double beta_start = 1e-4;
  double beta_end = 0.02;
  std::int64_t sr_epochs = 200;
  EpochUnit sr_epoch_unit = EpochUnit::Epoch;
  double lambda_adv = 1e-3;
  bool histmatch = true;
  std::int64_t reference_samples = 0;  // 0: every training image
  std::string diffusion_init;          // optional checkpoint with pretrained diffusion weights
};

struct TbganConfig {
  std::string preset = "full";
  int resolution = 256;
  std::string pretrain_root;
  dataset::Plane pretrain_plane = dataset::Plane::TransThalamic;
  std::int64_t pretrain_epochs = 500;
  std::string init_checkpoint;  // skips pretraining when set
  double r1_gamma = 10.0;
  int r1_interval = 16;
  double apa_target = 0.6;
  double apa_kimg = 500.0;
  double apa_ema = 0.99;
  std::string diffaug = "color,translation,cutout";
  double translation_ratio = 0.125;
  double cutout_ratio = 0.5;
};

/// Every key of the text format. `epochs` is the main stage: diffusion
/// finetuning for dsr, transfer finetuning for tbgan.
struct TrainConfig {
  Pipeline pipeline = Pipeline::Dsr;
  dataset::Plane plane = dataset::Plane::TransCerebellum;
  std::string data_root;
  std::string manifest;
  std::int64_t epochs = 10000;
  EpochUnit epoch_unit = EpochUnit::Epoch;
  std::int64_t batch_size = 16;
  double lr_generator = 1e-4;
  double lr_discriminator = 1e-4;
  double adam_beta1 = 0.9;
  double adam_beta2 = 0.999;
  std::uint64_t seed = 0;
  std::int64_t eval_every = 10;
  std::int64_t checkpoint_every = 0;  // 0: only initial and final

  bool augment_enabled = true;
  double augment_flip_prob = 0.5;
  double augment_zoom_min = 0.9, augment_zoom_max = 1.1;
  double augment_rotation_min = -10.0, augment_rotation_max = 10.0;

  std::int64_t fid_samples = 408;
  std::int64_t fid_real_samples = 0;  // 0: all reals
  std::string fid_extractor = "tiny";
  std::int64_t samples_save_count = 16;

  std::string resume;

  DsrConfig dsr;
  TbganConfig tbgan;

  static TrainConfig defaults(Pipeline pipeline);

  dataset::AugmentConfig augment() const;
  /// Raises ConfigError for unknown keys or unparsable values.
  void set(const std::string& key, const std::string& value);
  std::string get(const std::string& key) const;
  static std::vector<std::string> keys();
  /// Rejects out-of-range values.
  void validate() const;
  /// Sectioned `key = value` text that parses back to an equal config.
  std::string to_text() const;
};

/// `key = value` lines; `#` starts a comment; `[section]` prefixes the keys
/// below it with `section.`. The pipeline key picks the defaults, so it may
/// appear anywhere; overrides (`key=value`) are applied after the file.
TrainConfig parse_config(std::string_view text, const std::vector<std::string>& overrides = {});
TrainConfig load_config(const std::filesystem::path& file,
                        const std::vector<std::string>& overrides = {});

}  // namespace usgen::trainer
