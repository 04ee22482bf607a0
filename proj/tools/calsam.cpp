#include <CLI11.hpp>

#include <filesystem>
#include <iostream>

#include "calsam/experiments.hpp"

namespace fs = std::filesystem;
using namespace calsam;

namespace {

void say(const std::string& s) { std::cerr << s << '\n'; }

io::Manifest ensure_data(const RootConfig& c) {
  if (!fs::exists(exp::data_dir(c) / "manifest.tsv")) {
    say("no corpus under " + exp::data_dir(c).string() + ", generating");
    exp::generate(c);
  }
  return exp::open_manifest(c);
}

}  // namespace

int main(int argc, char** argv) {
  CLI::App app{"Calibrated decoder fine-tuning on synthetic volumes"};
  app.require_subcommand(1);
  std::string config_path;
  std::vector<std::string> overrides;
  std::string out;
  app.add_option("--config", config_path, "JSON config merged over the defaults")->check(CLI::ExistingFile);
  app.add_option("--set", overrides, "Override a config field, e.g. train.epochs=5 (repeatable)");
  app.add_option("--out", out, "Output root (default from config)");

  auto* gen = app.add_subcommand("generate", "Write the synthetic corpus and its split manifest");

  auto* train = app.add_subcommand("train", "Train one configuration");
  std::string ablation;
  std::optional<std::uint64_t> seed;
  std::string fold;
  train->add_option("--ablation", ablation, "sam-ft, fip-only, cmp-only, calsam or focal");
  train->add_option("--seed", seed, "Training seed");
  train->add_option("--fold", fold, "Fold name (default: first in the manifest)");

  auto* abl = app.add_subcommand("ablate", "Train the method grid over all seeds and folds and tabulate");
  auto* ev = app.add_subcommand("evaluate", "Compare base, focal, temperature-scaled and calibrated models");
  auto* bnd = app.add_subcommand("bounds", "Evaluate both generalization bounds for a checkpoint");
  std::string checkpoint;
  bnd->add_option("--checkpoint", checkpoint, "Checkpoint (default: first CalSAM seed)");
  auto* ver = app.add_subcommand("verify", "Check config hashes of every artifact under a directory");
  std::string verify_dir;
  ver->add_option("dir", verify_dir, "Directory (default: output root)");

  CLI11_PARSE(app, argc, argv);

  try {
    RootConfig cfg = config_path.empty() ? RootConfig{} : load_config(config_path);
    for (const auto& o : overrides) cfg = apply_override(cfg, o);
    if (!out.empty()) cfg.output = out;
    cfg.validate();

    if (*gen) {
      const auto m = exp::generate(cfg);
      std::cout << "wrote " << m.entries.size() << " volumes and " << m.folds.size() << " fold(s) to "
                << exp::data_dir(cfg).string() << " (config_hash " << config_hash(cfg) << ")\n";
    } else if (*train) {
      const auto m = ensure_data(cfg);
      if (!ablation.empty()) cfg.train.ablation = parse_ablation(ablation);
      if (seed) cfg.train.seed = *seed;
      if (fold.empty()) fold = m.folds.begin()->first;
      const auto data = io::load_dataset(exp::data_dir(cfg), m, fold, cfg);
      say("training " + display_name(cfg.train.ablation) + " seed " + std::to_string(cfg.train.seed) + " on " + fold);
      const auto rec = exp::train_run(cfg, cfg.train.ablation, cfg.train.seed, fold, data);
      std::cout << "run " << exp::run_dir(cfg, fold, cfg.train.ablation, cfg.train.seed).string() << '\n';
      for (const auto& s : rec.splits) {
        std::cout << "  " << synth::to_string(s.role) << ": DSC " << s.summary.dsc.mean << ", ECE "
                  << s.summary.ece.mean << '\n';
      }
    } else if (*abl) {
      ensure_data(cfg);
      const auto r = exp::ablate(cfg, say);
      exp::write_ablation(cfg, r);
      std::cout << io::read_file(fs::path(cfg.output) / "ablate" / "table2.txt");
    } else if (*ev) {
      ensure_data(cfg);
      const auto r = exp::evaluate(cfg, say);
      exp::write_evaluation(cfg, r);
      std::cout << io::read_file(fs::path(cfg.output) / "evaluate" / "table3.txt");
    } else if (*bnd) {
      ensure_data(cfg);
      const auto r = checkpoint.empty() ? exp::bounds(cfg) : exp::bounds(cfg, fs::path(checkpoint));
      exp::write_bounds(cfg, r);
      std::cout << io::read_file(fs::path(cfg.output) / "bounds" / "bounds.txt");
    } else if (*ver) {
      const auto rep = exp::verify(verify_dir.empty() ? fs::path(cfg.output) : fs::path(verify_dir));
      for (const auto& p : rep.problems) std::cout << "FAIL " << p << '\n';
      std::cout << rep.files << " artifact(s) checked, " << rep.problems.size() << " problem(s)\n";
      return rep.ok() ? 0 : 1;
    }
  } catch (const NonFiniteLoss& e) {
    std::cerr << "error: non-finite " << e.component() << " loss: " << e.what() << '\n';
    return 1;
  } catch (const std::exception& e) {
    std::cerr << "error: " << e.what() << '\n';
    return 1;
  }
  return 0;
}
