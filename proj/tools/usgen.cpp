// usgen: dataset scan, training, synthesis, FID and reporting.
#include "usgen/checkpoint.hpp"
#include "usgen/config.hpp"
#include "usgen/dataset.hpp"
#include "usgen/imageops.hpp"
#include "usgen/metrics.hpp"
#include "usgen/trainer.hpp"

#include <CLI11.hpp>

#include <algorithm>
#include <cstdlib>
#include <filesystem>
#include <fstream>
#include <iostream>
#include <optional>
#include <sstream>
#include <string>
#include <vector>

namespace fs = std::filesystem;
using namespace usgen;

namespace {

struct UsageError : std::runtime_error {
  using std::runtime_error::runtime_error;
};

std::optional<std::uint64_t> env_seed() {
  const char* v = std::getenv("USGEN_SEED");
  if (!v || !*v) return std::nullopt;
  try {
    std::size_t used = 0;
    const auto s = std::stoull(v, &used);
    if (used == std::string(v).size()) return s;
  } catch (const std::exception&) {
  }
  throw UsageError(std::string("USGEN_SEED is not an unsigned integer: '") + v + "'");
}

std::string read_text(const fs::path& file) {
  std::ifstream in(file);
  if (!in) throw UsageError("cannot read config file " + file.string());
  std::stringstream buf;
  buf << in.rdbuf();
  return buf.str();
}

ImageBatch load_image_dir(const fs::path& dir) {
  auto manifest = dataset::scan_dataset(dir, dataset::Plane::Other).manifest;
  std::erase_if(manifest.records, [](const dataset::ImageRecord& r) {
    return r.path.filename().string().find("grid") != std::string::npos;
  });
  if (manifest.count() < 2) throw EmptyDatasetError("fewer than 2 images in " + dir.string());
  const auto& first = manifest.records.front();
  return dataset::load_all(manifest, std::min(first.width, first.height), 1);
}

}  // namespace

int main(int argc, char** argv) {
  CLI::App app{"Fetal ultrasound synthesis: DSR-GAN and TB-GAN pipelines"};
  app.require_subcommand(1);

  auto* scan = app.add_subcommand("scan", "Index a dataset directory into a manifest");
  std::string scan_root, scan_plane = "other", scan_out = "manifest.tsv";
  scan->add_option("--root", scan_root, "Dataset root directory")->required();
  scan->add_option("--plane", scan_plane, "trans-cerebellum, trans-thalamic or other");
  scan->add_option("--out", scan_out, "Manifest file to write");

  auto* train = app.add_subcommand("train", "Train a pipeline from a config file");
  std::string train_config, train_out = "run", train_resume;
  std::vector<std::string> overrides;
  std::optional<std::uint64_t> train_seed;
  train->add_option("--config", train_config, "Config file (key = value)")->required();
  train->add_option("--override", overrides, "key=value, applied after the file")->take_all();
  train->add_option("--out", train_out, "Output directory");
  train->add_option("--seed", train_seed, "Seed (falls back to USGEN_SEED)");
  train->add_option("--resume", train_resume, "Checkpoint to resume from");

  auto* synth = app.add_subcommand("synth", "Sample images from a run checkpoint");
  std::string synth_ckpt, synth_out = "synth", synth_cdf;
  std::int64_t synth_count = 8;
  std::optional<std::uint64_t> synth_seed;
  bool synth_histmatch = false;
  synth->add_option("--checkpoint", synth_ckpt, "Checkpoint file")->required();
  synth->add_option("--count", synth_count, "Number of images");
  synth->add_option("--seed", synth_seed, "Seed (falls back to USGEN_SEED)");
  synth->add_option("--out", synth_out, "Output directory");
  synth->add_flag("--histmatch", synth_histmatch, "Histogram-match diffusion samples");
  synth->add_option("--reference-cdf", synth_cdf, "Reference CDF file for --histmatch");

  auto* fidc = app.add_subcommand("fid", "Append one FID row for a folder of images");
  std::string fid_real, fid_fake, fid_extractor = "tiny", fid_csv = "fid.csv", fid_tag = "external";
  std::int64_t fid_epoch = 0, fid_real_samples = 0;
  std::optional<std::uint64_t> fid_seed;
  fidc->add_option("--real", fid_real, "Manifest of real images")->required();
  fidc->add_option("--fake", fid_fake, "Directory of synthesized images")->required();
  fidc->add_option("--extractor", fid_extractor, "'tiny' or a TorchScript file");
  fidc->add_option("--csv", fid_csv, "FID report to append to");
  fidc->add_option("--epoch", fid_epoch, "Training epoch recorded with the row");
  fidc->add_option("--tag", fid_tag, "Model tag recorded with the row");
  fidc->add_option("--real-samples", fid_real_samples, "Real subset size (0: all)");
  fidc->add_option("--seed", fid_seed, "Subset seed (falls back to USGEN_SEED)");

  auto* report = app.add_subcommand("report", "Render figures for a run directory");
  std::string report_run = "run";
  report->add_option("--run", report_run, "Run directory")->required();

  try {
    app.parse(argc, argv);
  } catch (const CLI::ParseError& e) {
    const int code = app.exit(e);
    return code == 0 ? 0 : 1;
  }

  std::string stage = app.get_subcommands().front()->get_name();
  try {
    if (*scan) {
      const auto result = dataset::scan_dataset(scan_root, dataset::parse_plane(scan_plane));
      for (const auto& w : result.warnings) std::cerr << "scan: skipped " << w << '\n';
      dataset::save_manifest(result.manifest, scan_out);
      std::cout << "count=" << result.manifest.count() << std::endl;
    } else if (*train) {
      // Seed precedence: --seed, --override seed=, the config file, USGEN_SEED.
      std::string text = read_text(train_config);
      if (const auto s = env_seed()) text = "seed = " + std::to_string(*s) + "\n" + text;
      auto all = overrides;
      if (train_seed) all.push_back("seed=" + std::to_string(*train_seed));
      if (!train_resume.empty()) all.push_back("resume=" + train_resume);
      trainer::TrainConfig cfg;
      try {
        cfg = trainer::parse_config(text, all);
      } catch (const ConfigError& e) {
        throw UsageError(train_config + ": " + e.what());
      }
      const auto artifacts = trainer::run(cfg, train_out);
      std::cout << "out_dir=" << artifacts.out_dir.string() << '\n';
      if (!artifacts.fid_reports.empty()) std::cout << "fid=" << artifacts.fid_reports.back().fid << '\n';
    } else if (*synth) {
      const auto seed = synth_seed ? *synth_seed : env_seed().value_or(0);
      std::optional<imageops::IntensityCDF> cdf;
      if (!synth_cdf.empty()) cdf = imageops::load_cdf(synth_cdf);
      if (synth_histmatch && !cdf) throw UsageError("--histmatch needs --reference-cdf");
      const auto ckpt = load_checkpoint(synth_ckpt);
      const auto out = trainer::synthesize(ckpt, synth_count, seed, synth_histmatch, cdf, synth_out);
      std::cout << "files=" << out.files.size() << "\ngrid=" << out.grid.string() << '\n';
    } else if (*fidc) {
      const auto seed = fid_seed ? *fid_seed : env_seed().value_or(0);
      auto extractor = metrics::make_extractor(fid_extractor);
      const auto manifest = dataset::load_manifest(fid_real);
      const auto fakes = load_image_dir(fid_fake);
      auto row = metrics::fid(manifest, fakes, *extractor, fid_real_samples, seed);
      row.epoch = fid_epoch;
      row.model_tag = fid_tag;
      metrics::append_fid_csv(fid_csv, row);
      std::cout << "fid=" << row.fid << '\n';
    } else if (*report) {
      for (const auto& f : trainer::report_run(report_run)) std::cout << f.string() << '\n';
    }
  } catch (const UsageError& e) {
    std::cerr << "usgen " << stage << ": usage error: " << e.what() << '\n';
    return 1;
  } catch (const std::exception& e) {
    std::cerr << "usgen " << stage << ": error: " << e.what() << '\n';
    return 2;
  }
  return 0;
}
