#pragma once

#include "usgen/checkpoint.hpp"
#include "usgen/config.hpp"
#include "usgen/imageops.hpp"
#include "usgen/metrics.hpp"
#include "usgen/training.hpp"

#include <filesystem>
#include <map>
#include <optional>
#include <string>
#include <utility>
#include <vector>

namespace usgen::trainer {

namespace fs = std::filesystem;

struct RunArtifacts {
  fs::path out_dir;
  fs::path config_copy;
  fs::path manifest;
  std::vector<fs::path> checkpoints;  // in the order written
  fs::path traces_csv;                // long form: stage,epoch,series,value
  std::vector<fs::path> stage_traces;  // traces_<stage>.csv
  fs::path fid_csv;
  std::vector<fs::path> sample_grids;
  std::vector<fs::path> figures;
  std::optional<fs::path> reference_cdf;

  std::map<std::string, TraceTable> traces;
  std::vector<metrics::FIDReport> fid_reports;

  std::vector<fs::path> all_paths() const;
};

/// Runs every stage of the configured pipeline into `out_dir`:
/// `config.cfg`, `manifest.tsv`, `checkpoints/`, `traces.csv`,
/// `traces_<stage>.csv`, `fid.csv`, `samples/epoch_<n>/`, `figures/`.
/// On failure an `error_report.txt` lists the stage, the error and the files
/// produced so far, then the error propagates.
RunArtifacts run(const TrainConfig& config, const fs::path& out_dir);

struct Synthesis {
  ImageBatch images;
  std::vector<fs::path> files;
  fs::path grid;
};

/// Rebuilds the models recorded in a run checkpoint and samples `count`
/// images. dsr: diffusion, optional histogram match, x2 super-resolution;
/// tbgan: direct generation. Files go to `out_dir` as `<pipeline>_NNN.png`
/// plus `grid.png` when `out_dir` is non-empty.
Synthesis synthesize(const ModelCheckpoint& ckpt, std::int64_t count, std::uint64_t seed,
                     bool apply_histmatch, const std::optional<imageops::IntensityCDF>& reference_cdf,
                     const fs::path& out_dir = {});

/// Lays images out row-major on a dark background, `pad` pixels apart.
ImageBatch tile_grid(const ImageBatch& images, std::int64_t columns, int pad = 2);

struct ReportInputs {
  std::map<std::string, TraceTable> traces;  // keyed by stage
  std::vector<metrics::FIDReport> fid;
  std::vector<std::pair<std::string, ImageBatch>> sample_rows;  // label, batch
};

/// figures/losses.svg, figures/fid.svg and, with sample rows,
/// figures/samples.png plus samples.txt naming the rows top to bottom.
std::vector<fs::path> make_report(const ReportInputs& inputs, const fs::path& out_dir);

/// Rebuilds the figures of a finished run directory from its files.
std::vector<fs::path> report_run(const fs::path& run_dir);

/// Trace files of a run directory keyed by stage.
std::map<std::string, TraceTable> read_stage_traces(const fs::path& run_dir);

}  // namespace usgen::trainer
