#include <gtest/gtest.h>

#include <filesystem>
#include <fstream>

#include "calsam/experiments.hpp"

using namespace calsam;
namespace fs = std::filesystem;

namespace {

RootConfig tiny(const std::string& name) {
  RootConfig c;
  c.data.shape = {12, 12, 12};
  c.data.n_per_center = 3;
  c.data.split.holdout_per_center = 1;
  c.train.epochs = 2;
  c.seeds = {5};
  c.overhead.steps = 4;
  c.overhead.warmup = 1;
  c.output = (fs::temp_directory_path() / ("calsam_exp_" + name)).string();
  fs::remove_all(c.output);
  return c;
}

void append(const fs::path& p, const std::string& s) {
  std::ofstream(p, std::ios::binary | std::ios::app) << s;
}

}  // namespace

TEST(Experiments, AblationWritesTablesThatVerify) {
  const auto c = tiny("ablate");
  exp::generate(c);
  const auto r = exp::ablate(c);
  EXPECT_EQ(r.runs.size(), std::size(kAblationGrid));
  ASSERT_EQ(r.rows.size(), std::size(kAblationGrid));
  for (std::size_t i = 0; i < r.rows.size(); ++i) EXPECT_EQ(r.rows[i].ablation, kAblationGrid[i]);
  EXPECT_GT(r.overhead.ratio, 0.0);
  exp::write_ablation(c, r);
  for (const char* f : {"table2.csv", "table2.txt", "runs.csv", "overhead.csv", "config.json"}) {
    EXPECT_TRUE(fs::exists(fs::path(c.output) / "ablate" / f)) << f;
  }
  const auto table = io::read_file(fs::path(c.output) / "ablate" / "table2.txt");
  EXPECT_NE(table.find("+15%"), std::string::npos);
  const auto rep = exp::verify(c.output);
  EXPECT_TRUE(rep.ok()) << (rep.problems.empty() ? "" : rep.problems.front());
  EXPECT_GT(rep.files, 20u);
}

TEST(Experiments, VerifyFlagsTampering) {
  const auto c = tiny("tamper");
  exp::generate(c);
  const auto m = exp::open_manifest(c);
  const auto data = io::load_dataset(exp::data_dir(c), m, "scanner", c);
  exp::train_run(c, Ablation::sam_ft, 5, "scanner", data);
  ASSERT_TRUE(exp::verify(c.output).ok());

  const auto run = exp::run_dir(c, "scanner", Ablation::sam_ft, 5);
  append(exp::data_dir(c) / m.entries.front().volume, "x");
  auto rep = exp::verify(c.output);
  ASSERT_EQ(rep.problems.size(), 1u);
  EXPECT_NE(rep.problems[0].find("digest"), std::string::npos);

  auto text = io::read_file(run / "loss.csv");
  text.replace(text.find('=') + 1, 1, text[text.find('=') + 1] == '0' ? "1" : "0");
  io::write_file_atomic(run / "loss.csv", text);
  append(run / "stray.tmp", "");
  rep = exp::verify(c.output);
  EXPECT_EQ(rep.problems.size(), 3u);

  auto cfg = json::parse(io::read_file(run / "config.json"));
  cfg["train"]["lr0"] = 0.5;
  io::write_file_atomic(run / "config.json", cfg.dump());
  EXPECT_GT(exp::verify(c.output).problems.size(), 3u);
}

TEST(Experiments, ManifestMustMatchDataSection) {
  const auto c = tiny("mismatch");
  exp::generate(c);
  EXPECT_NO_THROW(exp::open_manifest(apply_override(c, "train.epochs=9")));
  EXPECT_THROW(exp::open_manifest(apply_override(c, "data.seed=8")), io::IoError);
}

TEST(Experiments, CheckpointReuseRequiresSameConfig) {
  const auto c = tiny("reuse");
  exp::generate(c);
  const auto m = exp::open_manifest(c);
  const auto data = io::load_dataset(exp::data_dir(c), m, "scanner", c);
  EXPECT_FALSE(exp::load_run(c, Ablation::calsam, 5, "scanner"));
  const auto rec = exp::train_run(c, Ablation::calsam, 5, "scanner", data);
  const auto back = exp::load_run(c, Ablation::calsam, 5, "scanner");
  ASSERT_TRUE(back);
  for (std::size_t i = 0; i < rec.params.phi().size(); ++i) {
    EXPECT_EQ(back->phi()[i].value.to_vector(), rec.params.phi()[i].value.to_vector());
  }
  EXPECT_FALSE(exp::load_run(apply_override(c, "train.lr0=0.5"), Ablation::calsam, 5, "scanner"));
}

TEST(Experiments, EvaluationRowsAndTemperature) {
  auto c = tiny("evaluate");
  c.seeds = {5, 6};
  exp::generate(c);
  const auto r = exp::evaluate(c);
  ASSERT_EQ(r.rows.size(), 4u);
  EXPECT_EQ(r.rows[0].method, "SAM-FT");
  EXPECT_EQ(r.rows[1].method, "+Focal");
  EXPECT_EQ(r.rows[2].method, "+TS");
  EXPECT_EQ(r.rows[3].method, "CalSAM");
  ASSERT_EQ(r.ts.size(), 2u);
  for (const auto& t : r.ts) {
    EXPECT_TRUE(t.masks_identical && t.dsc_identical && t.hd95_identical);
    EXPECT_LE(t.fit.nll_after, t.fit.nll_before);
  }
  EXPECT_EQ(r.rows[0].dsc.mean, r.rows[2].dsc.mean);
  exp::write_evaluation(c, r);
  EXPECT_TRUE(exp::verify(c.output).ok());
}

TEST(Experiments, BoundsEchoTheirInputs) {
  const auto c = tiny("bounds");
  exp::generate(c);
  EXPECT_THROW(exp::bounds(c), io::IoError);
  const auto m = exp::open_manifest(c);
  const auto data = io::load_dataset(exp::data_dir(c), m, "scanner", c);
  exp::train_run(c, Ablation::calsam, 5, "scanner", data);
  const auto r = exp::bounds(c);
  EXPECT_EQ(r.inputs.n, data.train.size());
  EXPECT_EQ(r.inputs.c, 1.0);
  EXPECT_EQ(r.pac, pac_bayes_bound(r.inputs));
  EXPECT_EQ(r.ece, ece_bound(r.inputs));
  EXPECT_GE(r.pac, r.inputs.emp_error);
  exp::write_bounds(c, r);
  const auto j = json::parse(io::read_file(fs::path(c.output) / "bounds" / "bounds.json"));
  EXPECT_EQ(j["inputs"]["n"].get<std::size_t>(), data.train.size());
  EXPECT_EQ(j["pac_bayes_bound"].get<double>(), r.pac);
  EXPECT_TRUE(exp::verify(c.output).ok());
}
