#include <doctest.h>

#include "support/phantom.hpp"
#include "usgen/trainer.hpp"

#include <cmath>
#include <fstream>
#include <iterator>
#include <set>

using namespace usgen;
using namespace usgen::trainer;
namespace fs = std::filesystem;

namespace {

std::string read_bytes(const fs::path& file) {
  std::ifstream in(file, std::ios::binary);
  return {std::istreambuf_iterator<char>(in), {}};
}

std::string tiny_dsr(const fs::path& data) {
  return "pipeline = dsr\nseed = 3\nplane = other\nepochs = 2\nbatch_size = 8\neval_every = 1\n"
         "data_root = " + data.string() + "\n"
         "[augment]\nenabled = false\n"
         "[fid]\nsamples = 8\n"
         "[samples]\nsave_count = 4\n"
         "[dsr]\npreset = tiny\nresolution = 16\ntimesteps = 10\nsr_epochs = 2\n";
}

std::string tiny_tbgan(const fs::path& data) {
  return "pipeline = tbgan\nseed = 5\nplane = other\nepochs = 2\nepoch_unit = step\nbatch_size = 4\n"
         "eval_every = 1\ndata_root = " + data.string() + "\n"
         "[fid]\nsamples = 8\n"
         "[samples]\nsave_count = 4\n"
         "[tbgan]\npreset = tiny\nresolution = 16\nr1_interval = 2\n";
}

fs::path phantom_root(const std::string& name, std::int64_t count = 16) {
  const auto dir = testing::scratch_dir(name);
  testing::write_phantoms(dir, count, 32, 1);
  return dir;
}

// Every trace column except the wall time.
std::map<std::string, std::vector<std::vector<double>>> timeless(const std::map<std::string, TraceTable>& traces) {
  std::map<std::string, std::vector<std::vector<double>>> out;
  for (const auto& [stage, t] : traces) {
    REQUIRE(t.columns.back() == "wall_time_s");
    for (auto row : t.rows) {
      row.pop_back();
      out[stage].push_back(row);
    }
  }
  return out;
}

}  // namespace

TEST_SUITE("trainer") {

TEST_CASE("zero epochs write the initial checkpoint and one FID row") {
  const auto data = phantom_root("trainer_zero_data", 8);
  const auto out = testing::scratch_dir("trainer_zero");
  const auto cfg = parse_config(tiny_dsr(data), {"epochs=0", "dsr.sr_epochs=0"});
  const auto a = run(cfg, out);
  REQUIRE(a.checkpoints.size() == 1);
  CHECK(a.checkpoints[0].filename() == "initial.ckpt");
  CHECK_FALSE(fs::exists(out / "checkpoints" / "final.ckpt"));
  REQUIRE(a.fid_reports.size() == 1);
  CHECK(a.fid_reports[0].epoch == 0);
  CHECK(a.fid_reports[0].model_tag == "dsr");
  CHECK(metrics::read_fid_csv(out / "fid.csv").size() == 1);
  CHECK(load_config(out / "config.cfg").to_text() == cfg.to_text());
}

TEST_CASE("a tiny dsr run writes every artifact") {
  const auto data = phantom_root("trainer_dsr_data");
  const auto out = testing::scratch_dir("trainer_dsr");
  const auto a = run(parse_config(tiny_dsr(data)), out);
  for (const auto& p : a.all_paths()) CHECK_MESSAGE(fs::exists(p), p.string());
  CHECK(fs::exists(out / "checkpoints" / "final.ckpt"));
  CHECK(a.traces.at("diffusion").rows.size() == 2);
  CHECK(a.traces.at("srgan").rows.size() == 2);
  CHECK(a.traces.at("srgan").columns ==
        std::vector<std::string>{"epoch", "g_loss", "d_loss", "content_loss", "wall_time_s"});
  // eval_every = 1 puts a row after each epoch of each stage.
  REQUIRE(a.fid_reports.size() == 4);
  CHECK(a.fid_reports[0].model_tag == "dsr-diffusion");
  CHECK(a.fid_reports[3].model_tag == "dsr");
  for (const auto& r : a.fid_reports) {
    CHECK(r.extractor_checksum == a.fid_reports[0].extractor_checksum);
    CHECK(r.n_fake == 8);
    CHECK(std::isfinite(r.fid));
  }
  CHECK(a.figures.size() == 4);
  CHECK(a.reference_cdf);

  std::ifstream traces(a.traces_csv);
  std::string header;
  std::getline(traces, header);
  CHECK(header == "stage,epoch,series,value");
  CHECK(read_stage_traces(out).size() == 2);

  const auto final_ckpt = load_checkpoint(out / "checkpoints" / "final.ckpt");
  CHECK(final_ckpt.stage == "srgan");
  CHECK(final_ckpt.extra["epochs"]["diffusion"] == 2);
  CHECK(final_ckpt.extra["epochs"]["srgan"] == 2);
  CHECK(final_ckpt.extra["fid"].size() == 4);
}

TEST_CASE("identical configs give identical runs") {
  const auto data = phantom_root("trainer_det_data");
  const auto cfg = parse_config(tiny_dsr(data));
  const auto a = run(cfg, testing::scratch_dir("trainer_det_a"));
  const auto b = run(cfg, testing::scratch_dir("trainer_det_b"));
  CHECK(timeless(a.traces) == timeless(b.traces));
  REQUIRE(a.fid_reports.size() == b.fid_reports.size());
  for (std::size_t i = 0; i < a.fid_reports.size(); ++i) CHECK(a.fid_reports[i].fid == b.fid_reports[i].fid);
  REQUIRE(a.sample_grids.size() == b.sample_grids.size());
  for (std::size_t i = 0; i < a.sample_grids.size(); ++i) {
    CHECK(read_bytes(a.sample_grids[i]) == read_bytes(b.sample_grids[i]));
  }
  CHECK(read_bytes(a.fid_csv) == read_bytes(b.fid_csv));
  const auto ca = load_checkpoint(a.checkpoints.back());
  const auto cb = load_checkpoint(b.checkpoints.back());
  REQUIRE(ca.arrays.size() == cb.arrays.size());
  for (std::size_t i = 0; i < ca.arrays.size(); ++i) CHECK(torch::equal(ca.arrays[i].second, cb.arrays[i].second));
}

TEST_CASE("resuming from a mid-run checkpoint ends on the same weights") {
  const auto data = phantom_root("trainer_resume_data");
  const auto text = tiny_dsr(data);
  const auto first_dir = testing::scratch_dir("trainer_resume_a");
  const auto straight = run(parse_config(text, {"epochs=3", "checkpoint_every=1"}), first_dir);
  const auto resumed_dir = testing::scratch_dir("trainer_resume_b");
  const auto from = first_dir / "checkpoints" / "diffusion_epoch_2.ckpt";
  const auto resumed = run(parse_config(text, {"epochs=3", "checkpoint_every=1", "resume=" + from.string()}), resumed_dir);
  const auto ca = load_checkpoint(first_dir / "checkpoints" / "final.ckpt");
  const auto cb = load_checkpoint(resumed_dir / "checkpoints" / "final.ckpt");
  REQUIRE(ca.arrays.size() == cb.arrays.size());
  for (std::size_t i = 0; i < ca.arrays.size(); ++i) {
    CHECK(ca.arrays[i].first == cb.arrays[i].first);
    CHECK(torch::equal(ca.arrays[i].second, cb.arrays[i].second));
  }
  CHECK(timeless(resumed.traces) == timeless(straight.traces));
  REQUIRE(resumed.fid_reports.size() == straight.fid_reports.size());
  for (std::size_t i = 0; i < resumed.fid_reports.size(); ++i) {
    CHECK(resumed.fid_reports[i].fid == straight.fid_reports[i].fid);
  }
  CHECK(load_checkpoint(from).epoch == 2);
  CHECK(ca.config_text == cb.config_text);
}

TEST_CASE("resume rejects a checkpoint from another pipeline") {
  const auto data = phantom_root("trainer_mismatch_data", 8);
  const auto dsr_dir = testing::scratch_dir("trainer_mismatch_dsr");
  run(parse_config(tiny_dsr(data), {"epochs=0", "dsr.sr_epochs=0"}), dsr_dir);
  const auto out = testing::scratch_dir("trainer_mismatch");
  const auto cfg = parse_config(tiny_tbgan(data), {"resume=" + (dsr_dir / "checkpoints" / "initial.ckpt").string()});
  CHECK_THROWS_AS(run(cfg, out), ConfigMismatchError);
  const auto report = read_bytes(out / "error_report.txt");
  CHECK(report.find("error:") != std::string::npos);
  CHECK(report.find("config.cfg") != std::string::npos);
}

TEST_CASE("a missing data root fails with an error report") {
  const auto out = testing::scratch_dir("trainer_missing");
  const auto cfg = parse_config(tiny_dsr("/nonexistent/usgen_data"));
  CHECK_THROWS_AS(run(cfg, out), LoadError);
  const auto report = read_bytes(out / "error_report.txt");
  CHECK(report.find("stage: setup") != std::string::npos);
  CHECK(report.find("/nonexistent/usgen_data") != std::string::npos);
}

TEST_CASE("synthesis from a run checkpoint") {
  const auto data = phantom_root("trainer_synth_data");
  const auto out = testing::scratch_dir("trainer_synth");
  const auto a = run(parse_config(tiny_dsr(data), {"epochs=1", "dsr.sr_epochs=1"}), out);
  const auto ckpt = load_checkpoint(out / "checkpoints" / "final.ckpt");
  const auto cdf = imageops::load_cdf(*a.reference_cdf);
  const auto dir = testing::scratch_dir("trainer_synth_out");
  const auto s = synthesize(ckpt, 8, 21, true, cdf, dir);
  CHECK(s.images.sizes() == torch::IntArrayRef{8, 1, 32, 32});
  CHECK(s.files.size() == 8);
  for (const auto& f : s.files) CHECK(fs::exists(f));
  CHECK(s.files[0].filename() == "dsr_000.png");
  CHECK(fs::exists(s.grid));
  CHECK(torch::equal(s.images, synthesize(ckpt, 8, 21, true, cdf).images));
  CHECK_FALSE(torch::equal(s.images, synthesize(ckpt, 8, 22, true, cdf).images));
  CHECK_THROWS_AS(synthesize(ckpt, 8, 21, true, std::nullopt), ConfigError);
  CHECK_THROWS_AS(synthesize(ckpt, 0, 21, false, std::nullopt), ShapeError);
  const auto again = testing::scratch_dir("trainer_synth_again");
  const auto t = synthesize(ckpt, 8, 21, true, cdf, again);
  CHECK(read_bytes(s.files[3]) == read_bytes(t.files[3]));
}

TEST_CASE("tbgan run with pretraining evaluates both stages") {
  const auto pre = testing::scratch_dir("trainer_tbgan_pre");
  testing::write_phantoms(pre, 8, 32, 7);
  const auto data = phantom_root("trainer_tbgan_data", 8);
  const auto out = testing::scratch_dir("trainer_tbgan");
  const auto a = run(parse_config(tiny_tbgan(data), {"tbgan.pretrain_root=" + pre.string(), "tbgan.pretrain_epochs=2",
                                                     "tbgan.pretrain_plane=other"}),
                     out);
  std::set<std::string> tags;
  for (const auto& r : a.fid_reports) tags.insert(r.model_tag);
  CHECK(tags == std::set<std::string>{"tbgan-pretrain", "tbgan"});
  const auto& t = a.traces.at("tbgan");
  CHECK(t.columns == std::vector<std::string>{"epoch", "g_loss", "d_loss", "r1", "apa_p", "lambda_r", "wall_time_s"});
  for (const double p : t.column("apa_p")) CHECK((p >= 0.0 && p <= 1.0));
  const auto final_ckpt = load_checkpoint(out / "checkpoints" / "final.ckpt");
  CHECK(final_ckpt.has("tbgan/g/const_input"));
  CHECK(final_ckpt.has("tbgan-pretrain/g/const_input"));

  const auto s = synthesize(final_ckpt, 3, 1, false, std::nullopt);
  CHECK(s.images.sizes() == torch::IntArrayRef{3, 1, 16, 16});

  // A finished run seeds a new transfer run; pretraining is then skipped.
  const auto next = testing::scratch_dir("trainer_tbgan_init");
  const auto b = run(parse_config(tiny_tbgan(data), {"tbgan.pretrain_root=" + pre.string(),
                                                     "tbgan.init_checkpoint=" + (out / "checkpoints" / "final.ckpt").string()}),
                     next);
  CHECK(b.traces.count("tbgan-pretrain") == 0);
  CHECK(b.traces.at("tbgan").rows.size() == 2);
}

TEST_CASE("report figures") {
  TraceTable one{{"epoch", "loss", "wall_time_s"}, {{1, 0.5, 0.1}}};
  const auto dir = testing::scratch_dir("trainer_report");
  ReportInputs in;
  in.traces["diffusion"] = one;
  in.fid = {{1, "dsr-diffusion", 8, 8, 64, "c", 3.0}, {1, "dsr", 8, 8, 64, "c", 2.0}, {2, "dsr", 8, 8, 64, "c", 1.5}};
  const auto batch = testing::sector_phantoms(3, 16, 1);
  in.sample_rows = {{"real batch 1", batch}, {"synthetic batch 1", batch.narrow(0, 0, 2)}};
  const auto files = make_report(in, dir);
  REQUIRE(files.size() == 4);
  for (const auto& f : files) CHECK(fs::exists(f));
  const auto fid_svg = read_bytes(dir / "figures" / "fid.svg");
  CHECK(fid_svg.find("<text class=\"legend\" ") != std::string::npos);
  CHECK(fid_svg.find(">dsr-diffusion</text>") != std::string::npos);
  CHECK(fid_svg.find(">dsr</text>") != std::string::npos);
  CHECK(read_bytes(dir / "figures" / "samples.txt") == "real batch 1\nsynthetic batch 1\n");
  CHECK(read_bytes(dir / "figures" / "losses.svg").find(">diffusion:loss</text>") != std::string::npos);
  CHECK_THROWS_AS(make_report({}, dir), ShapeError);
}

TEST_CASE("tile_grid lays images out row-major") {
  auto images = torch::stack({torch::full({1, 2, 2}, 0.1f), torch::full({1, 2, 2}, 0.2f), torch::full({1, 2, 2}, 0.3f)});
  const auto grid = tile_grid(images, 2, 1);
  CHECK(grid.sizes() == torch::IntArrayRef{1, 1, 7, 7});
  CHECK(grid[0][0][1][1].item<float>() == 0.1f);
  CHECK(grid[0][0][1][4].item<float>() == 0.2f);
  CHECK(grid[0][0][4][1].item<float>() == 0.3f);
  CHECK(grid[0][0][4][4].item<float>() == -1.0f);
  CHECK(grid[0][0][0][0].item<float>() == -1.0f);
}

}  // TEST_SUITE
