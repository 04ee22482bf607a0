#pragma once

// Experiment drivers behind the command-line tool: ablation grid, calibration
// comparison, bound evaluation and artifact verification. Output layout under
// the configured root:
//
//   data/                       manifest.tsv, folds/, volumes/, masks/
//   runs/<fold>/<method>_s<seed>/  one run record each
//   ablate/  evaluate/  bounds/ tables, each with its config.json

#include <chrono>
#include <filesystem>
#include <functional>
#include <iomanip>
#include <map>
#include <optional>
#include <sstream>
#include <string>
#include <vector>

#include "calsam/bounds.hpp"
#include "calsam/config.hpp"
#include "calsam/io.hpp"
#include "calsam/metrics.hpp"
#include "calsam/trainer.hpp"

namespace calsam::exp {

namespace fs = std::filesystem;

using Log = std::function<void(const std::string&)>;

inline void quiet(const std::string&) {}

inline fs::path data_dir(const RootConfig& c) { return fs::path(c.output) / "data"; }

inline fs::path run_dir(const RootConfig& c, const std::string& fold, Ablation a, std::uint64_t seed) {
  return fs::path(c.output) / "runs" / fold / (to_string(a) + "_s" + std::to_string(seed));
}

inline void write_config_snapshot(const fs::path& dir, const RootConfig& c) {
  json j = to_json(c);
  j["config_hash"] = config_hash(c);
  io::write_file_atomic(dir / "config.json", j.dump(2) + "\n");
}

inline io::Manifest generate(const RootConfig& c) {
  const auto dir = data_dir(c);
  auto m = io::generate_dataset(c, dir);
  write_config_snapshot(dir, c);
  return m;
}

/// Reads the manifest and checks it was generated with this data section.
inline io::Manifest open_manifest(const RootConfig& c) {
  const auto dir = data_dir(c);
  auto m = io::read_manifest(dir);
  if (m.data_hash != data_hash(c)) {
    throw io::IoError(dir.string() + ": manifest data_hash " + m.data_hash + " does not match the configured data (" +
                      data_hash(c) + "); rerun generate");
  }
  return m;
}

inline RootConfig with_run(const RootConfig& root, Ablation a, std::uint64_t seed) {
  RootConfig c = root;
  c.train.ablation = a;
  c.train.seed = seed;
  return c;
}

/// Trains one configuration and writes its run record.
inline RunRecord train_run(const RootConfig& root, Ablation a, std::uint64_t seed, const std::string& fold,
                           const Dataset& data) {
  const RootConfig c = with_run(root, a, seed);
  auto rec = run_experiment(c.train, data, c.metrics.bins);
  io::write_run_record(run_dir(root, fold, a, seed), c, rec);
  return rec;
}

/// Decoder of an existing run when its checkpoint was written by the same
/// configuration.
inline std::optional<ParamStore> load_run(const RootConfig& root, Ablation a, std::uint64_t seed,
                                          const std::string& fold) {
  const RootConfig c = with_run(root, a, seed);
  const auto path = run_dir(root, fold, a, seed) / "checkpoint.cspt";
  if (!fs::exists(path)) return std::nullopt;
  std::string hash;
  auto p = io::load_checkpoint(path, c.train.model(), &hash);
  if (hash != config_hash(c)) return std::nullopt;
  return p;
}

inline const std::vector<Example>& eval_set(const Dataset& d, synth::Role role) {
  for (const auto& [r, ex] : d.eval)
    if (r == role) return ex;
  throw std::invalid_argument("dataset has no " + synth::to_string(role) + " split");
}

// ---------------------------------------------------------------------------
// Table formatting

inline std::string pm(const MeanStd& m, double scale, int prec) {
  if (m.count == 0) return "n/a";
  std::ostringstream o;
  o << std::fixed << std::setprecision(prec) << m.mean * scale << " +/- " << m.std * scale;
  return o.str();
}

inline std::string render_table(const std::vector<std::string>& header, const std::vector<std::vector<std::string>>& rows) {
  std::vector<std::size_t> w(header.size());
  for (std::size_t i = 0; i < header.size(); ++i) w[i] = header[i].size();
  for (const auto& r : rows)
    for (std::size_t i = 0; i < r.size(); ++i) w[i] = std::max(w[i], r[i].size());
  std::ostringstream o;
  auto line = [&](const std::vector<std::string>& cells) {
    for (std::size_t i = 0; i < cells.size(); ++i) {
      o << (i ? "  " : "") << std::left << std::setw(static_cast<int>(w[i])) << cells[i];
    }
    o << '\n';
  };
  line(header);
  std::size_t total = 0;
  for (auto x : w) total += x;
  o << std::string(total + 2 * (w.size() - 1), '-') << '\n';
  for (const auto& r : rows) line(r);
  return o.str();
}

// Mean and std columns; nan when no value was defined.
inline std::string ms_csv(const MeanStd& m) {
  return m.count ? io::fmt(m.mean) + ',' + io::fmt(m.std) : std::string("nan,nan");
}

// ---------------------------------------------------------------------------
// Ablation grid

struct RunSummary {
  std::string fold;
  Ablation ablation = Ablation::sam_ft;
  std::uint64_t seed = 0;
  SplitSummary source, target;
  double dgg_dsc = 0.0;
  double dgg_ece = 0.0;
  double seconds = 0.0;
  double median_step = 0.0;
};

struct MethodRow {
  std::string fold;
  Ablation ablation = Ablation::sam_ft;
  MeanStd dsc, hd95, ece, dgg;  // target split, across seeds
};

struct AblationResult {
  std::vector<RunSummary> runs;
  std::vector<MethodRow> rows;
  OverheadResult overhead;
  double grid_seconds = 0.0;
};

inline std::vector<MethodRow> aggregate(const std::vector<RunSummary>& runs) {
  std::vector<MethodRow> rows;
  std::vector<std::string> folds;
  for (const auto& r : runs)
    if (std::find(folds.begin(), folds.end(), r.fold) == folds.end()) folds.push_back(r.fold);
  for (const auto& f : folds) {
    for (auto a : kAblationGrid) {
      std::vector<double> d, h, e, g;
      for (const auto& r : runs) {
        if (r.fold != f || r.ablation != a) continue;
        d.push_back(r.target.dsc.mean);
        if (r.target.hd95.count) h.push_back(r.target.hd95.mean);
        e.push_back(r.target.ece.mean);
        g.push_back(r.dgg_dsc);
      }
      if (d.empty()) continue;
      rows.push_back({f, a, mean_std(d), mean_std(h), mean_std(e), mean_std(g)});
    }
  }
  return rows;
}

/// Trains every method of the grid for every seed on every fold, then times
/// CalSAM steps with and without the feature penalty.
inline AblationResult ablate(const RootConfig& root, const Log& log = quiet) {
  root.validate();
  const auto manifest = open_manifest(root);
  AblationResult out;
  const auto t0 = std::chrono::steady_clock::now();
  std::optional<Dataset> first;
  for (const auto& [fold, roles] : manifest.folds) {
    const Dataset data = io::load_dataset(data_dir(root), manifest, fold, root);
    for (auto seed : root.seeds) {
      for (auto a : kAblationGrid) {
        const auto r0 = std::chrono::steady_clock::now();
        const auto rec = train_run(root, a, seed, fold, data);
        RunSummary s{fold, a, seed, {}, {}, 0.0, 0.0, 0.0, median(rec.step_seconds)};
        s.seconds = std::chrono::duration<double>(std::chrono::steady_clock::now() - r0).count();
        if (const auto* src = rec.split(synth::Role::source)) s.source = src->summary;
        if (const auto* tgt = rec.split(synth::Role::target)) s.target = tgt->summary;
        s.dgg_dsc = rec.dgg_dsc().value_or(0.0);
        s.dgg_ece = rec.dgg_ece().value_or(0.0);
        log(fold + " " + display_name(a) + " seed " + std::to_string(seed) + ": target DSC " +
            std::to_string(s.target.dsc.mean) + ", ECE " + std::to_string(s.target.ece.mean) + " (" +
            std::to_string(s.seconds) + " s)");
        out.runs.push_back(s);
      }
    }
    if (!first) first = data;
  }
  out.grid_seconds = std::chrono::duration<double>(std::chrono::steady_clock::now() - t0).count();
  out.rows = aggregate(out.runs);

  TrainConfig with = with_run(root, Ablation::calsam, root.seeds.front()).train;
  TrainConfig without = with;
  without.weights.lambda1 = 0.0;
  out.overhead = measure_overhead(with, without, first->train, root.overhead.steps, root.overhead.warmup);
  return out;
}

inline constexpr double kReferenceOverhead = 0.15;

inline std::string overhead_line(const OverheadResult& o) {
  std::ostringstream s;
  s << std::fixed << std::setprecision(1) << "FIP step-time overhead: " << (o.ratio - 1.0) * 100.0 << "% (ratio "
    << std::setprecision(3) << o.ratio << ", median " << o.median_with * 1e3 << " ms vs " << o.median_without * 1e3
    << " ms over " << o.steps << " steps); reference figure: +" << std::setprecision(0) << kReferenceOverhead * 100.0
    << "%";
  return s.str();
}

inline void write_ablation(const RootConfig& root, const AblationResult& r) {
  const fs::path dir = fs::path(root.output) / "ablate";
  const std::string hash = config_hash(root);
  write_config_snapshot(dir, root);
  std::ostringstream csv;
  csv << io::hash_line(hash)
      << "split,method,seeds,dsc_mean,dsc_std,hd95_mm_mean,hd95_mm_std,ece_mean,ece_std,dgg_dsc_mean,dgg_dsc_std\n";
  std::vector<std::vector<std::string>> rows;
  for (const auto& m : r.rows) {
    csv << m.fold << ',' << display_name(m.ablation) << ',' << m.dsc.count << ',' << io::fmt(m.dsc.mean) << ','
        << io::fmt(m.dsc.std) << ',' << ms_csv(m.hd95) << ','
        << io::fmt(m.ece.mean) << ',' << io::fmt(m.ece.std) << ',' << io::fmt(m.dgg.mean) << ','
        << io::fmt(m.dgg.std) << '\n';
    rows.push_back({m.fold, display_name(m.ablation), pm(m.dsc, 100.0, 1), pm(m.hd95, 1.0, 2), pm(m.ece, 100.0, 2),
                    pm(m.dgg, 100.0, 2)});
  }
  io::write_file_atomic(dir / "table2.csv", csv.str());

  std::ostringstream txt;
  txt << io::hash_line(hash) << "Ablation on the target split (mean +/- std over " << root.seeds.size()
      << " seeds)\n\n"
      << render_table({"Split", "Method", "DSC (%)", "HD95 (mm)", "ECE (%)", "DGG (DSC pts)"}, rows) << '\n'
      << overhead_line(r.overhead) << '\n'
      << "Grid wall time: " << std::fixed << std::setprecision(1) << r.grid_seconds << " s\n";
  io::write_file_atomic(dir / "table2.txt", txt.str());

  std::ostringstream runs;
  runs << io::hash_line(hash)
       << "split,method,seed,source_dsc,target_dsc,source_ece,target_ece,target_hd95_mm,dgg_dsc,dgg_ece,seconds,"
          "median_step_seconds\n";
  for (const auto& s : r.runs) {
    runs << s.fold << ',' << to_string(s.ablation) << ',' << s.seed << ',' << io::fmt(s.source.dsc.mean) << ','
         << io::fmt(s.target.dsc.mean) << ',' << io::fmt(s.source.ece.mean) << ',' << io::fmt(s.target.ece.mean)
         << ',' << (s.target.hd95.count ? io::fmt(s.target.hd95.mean) : "nan") << ',' << io::fmt(s.dgg_dsc) << ',' << io::fmt(s.dgg_ece) << ','
         << io::fmt(s.seconds) << ',' << io::fmt(s.median_step) << '\n';
  }
  io::write_file_atomic(dir / "runs.csv", runs.str());

  std::ostringstream oh;
  oh << io::hash_line(hash) << "ratio,median_with_s,median_without_s,steps,reference_overhead\n"
     << io::fmt(r.overhead.ratio) << ',' << io::fmt(r.overhead.median_with) << ','
     << io::fmt(r.overhead.median_without) << ',' << r.overhead.steps << ',' << io::fmt(kReferenceOverhead) << '\n';
  io::write_file_atomic(dir / "overhead.csv", oh.str());
}

// ---------------------------------------------------------------------------
// Calibration comparison: SAM-FT, +Focal, +TS, CalSAM on the target split.

struct CalibRow {
  std::string method;
  MeanStd dsc, hd95, ece, ace, brier;
};

struct TsFit {
  std::uint64_t seed = 0;
  TemperatureFit fit;       // on the source holdout
  bool masks_identical = true;  // thresholded target masks of base and TS agree
  bool dsc_identical = true;
  bool hd95_identical = true;
};

struct EvaluationResult {
  std::string fold;
  std::vector<CalibRow> rows;
  std::vector<TsFit> ts;
};

inline std::vector<double> flat_logits(const ParamStore& p, const ModelConfig& m, std::span<const Example> data) {
  std::vector<double> out;
  for (const auto& e : data) {
    const auto v = predict_logits(e.input, p, m).to_vector();
    out.insert(out.end(), v.begin(), v.end());
  }
  return out;
}

inline std::vector<std::uint8_t> flat_labels(std::span<const Example> data) {
  std::vector<std::uint8_t> out;
  for (const auto& e : data) out.insert(out.end(), e.mask.labels.begin(), e.mask.labels.end());
  return out;
}

inline std::vector<std::vector<double>> unflatten(const std::vector<double>& flat, std::span<const Example> data) {
  std::vector<std::vector<double>> out;
  std::size_t at = 0;
  for (const auto& e : data) {
    const auto n = e.mask.labels.size();
    out.emplace_back(flat.begin() + static_cast<std::ptrdiff_t>(at), flat.begin() + static_cast<std::ptrdiff_t>(at + n));
    at += n;
  }
  return out;
}

inline CalibRow calib_row(const std::string& method, const std::vector<SplitResult>& per_seed) {
  std::vector<double> d, h, e, a, b;
  for (const auto& s : per_seed) {
    d.push_back(s.summary.dsc.mean);
    if (s.summary.hd95.count) h.push_back(s.summary.hd95.mean);
    e.push_back(s.summary.ece.mean);
    a.push_back(s.summary.ace.mean);
    b.push_back(s.summary.brier.mean);
  }
  return {method, mean_std(d), mean_std(h), mean_std(e), mean_std(a), mean_std(b)};
}

/// Uses existing runs of the same configuration where present and trains the
/// rest. Temperature is fitted on the source holdout of each SAM-FT run.
inline EvaluationResult evaluate(const RootConfig& root, const Log& log = quiet) {
  root.validate();
  const auto manifest = open_manifest(root);
  EvaluationResult out;
  out.fold = manifest.folds.begin()->first;
  const Dataset data = io::load_dataset(data_dir(root), manifest, out.fold, root);
  const auto& val = eval_set(data, synth::Role::source);
  const auto& target = eval_set(data, synth::Role::target);
  const auto val_labels = flat_labels(val);
  const ModelConfig mcfg = root.train.model();
  const std::size_t bins = root.metrics.bins;

  auto params_for = [&](Ablation a, std::uint64_t seed) {
    if (auto p = load_run(root, a, seed, out.fold)) {
      log("reusing " + run_dir(root, out.fold, a, seed).string());
      return *p;
    }
    log("training " + display_name(a) + " seed " + std::to_string(seed));
    return train_run(root, a, seed, out.fold, data).params;
  };

  std::map<std::string, std::vector<SplitResult>> by_method;
  for (auto seed : root.seeds) {
    for (auto a : {Ablation::sam_ft, Ablation::focal, Ablation::calsam}) {
      const ParamStore p = params_for(a, seed);
      const auto logits = flat_logits(p, mcfg, target);
      const auto base = evaluate_split(synth::Role::target, target, unflatten(sigmoid_scaled(logits, 1.0), target), bins);
      by_method[display_name(a)].push_back(base);
      if (a != Ablation::sam_ft) continue;

      TsFit ts;
      ts.seed = seed;
      ts.fit = temperature_scale(flat_logits(p, mcfg, val), val_labels, bins);
      const auto scaled = unflatten(sigmoid_scaled(logits, ts.fit.temperature), target);
      const auto tsr = evaluate_split(synth::Role::target, target, scaled, bins);
      const auto unscaled = unflatten(sigmoid_scaled(logits, 1.0), target);
      for (std::size_t i = 0; i < target.size(); ++i) {
        ts.masks_identical = ts.masks_identical && threshold_mask(scaled[i], target[i].mask.dims) ==
                                                       threshold_mask(unscaled[i], target[i].mask.dims);
        ts.dsc_identical = ts.dsc_identical && tsr.rows[i].dsc == base.rows[i].dsc;
        ts.hd95_identical = ts.hd95_identical && tsr.rows[i].hd95 == base.rows[i].hd95;
      }
      out.ts.push_back(ts);
      by_method["+TS"].push_back(tsr);
      log("seed " + std::to_string(seed) + ": temperature " + std::to_string(ts.fit.temperature));
    }
  }
  for (const char* m : {"SAM-FT", "+Focal", "+TS", "CalSAM"}) out.rows.push_back(calib_row(m, by_method.at(m)));
  return out;
}

inline void write_evaluation(const RootConfig& root, const EvaluationResult& r) {
  const fs::path dir = fs::path(root.output) / "evaluate";
  const std::string hash = config_hash(root);
  write_config_snapshot(dir, root);
  std::ostringstream csv;
  csv << io::hash_line(hash)
      << "method,seeds,dsc_mean,dsc_std,hd95_mm_mean,hd95_mm_std,ece_mean,ece_std,ace_mean,ace_std,brier_mean,"
         "brier_std\n";
  std::vector<std::vector<std::string>> rows;
  for (const auto& m : r.rows) {
    csv << m.method << ',' << m.dsc.count << ',' << io::fmt(m.dsc.mean) << ',' << io::fmt(m.dsc.std) << ','
        << ms_csv(m.hd95) << ',' << io::fmt(m.ece.mean) << ','
        << io::fmt(m.ece.std) << ',' << io::fmt(m.ace.mean) << ',' << io::fmt(m.ace.std) << ','
        << io::fmt(m.brier.mean) << ',' << io::fmt(m.brier.std) << '\n';
    rows.push_back({m.method, pm(m.dsc, 100.0, 1), pm(m.hd95, 1.0, 2), pm(m.ece, 100.0, 2), pm(m.ace, 100.0, 2),
                    pm(m.brier, 100.0, 3)});
  }
  io::write_file_atomic(dir / "table3.csv", csv.str());

  std::ostringstream ts;
  ts << io::hash_line(hash)
     << "seed,temperature,val_nll_before,val_nll_after,val_ece_before,val_ece_after,masks_identical,dsc_identical,"
        "hd95_identical\n";
  for (const auto& t : r.ts) {
    ts << t.seed << ',' << io::fmt(t.fit.temperature) << ',' << io::fmt(t.fit.nll_before) << ','
       << io::fmt(t.fit.nll_after) << ',' << io::fmt(t.fit.ece_before) << ',' << io::fmt(t.fit.ece_after) << ','
       << t.masks_identical << ',' << t.dsc_identical << ',' << t.hd95_identical << '\n';
  }
  io::write_file_atomic(dir / "temperature.csv", ts.str());

  std::ostringstream txt;
  txt << io::hash_line(hash) << "Calibration comparison on the target split of '" << r.fold << "' (mean +/- std over "
      << (r.rows.empty() ? 0 : r.rows.front().dsc.count) << " seeds)\n\n"
      << render_table({"Method", "DSC (%)", "HD95 (mm)", "ECE (%)", "ACE (%)", "Brier (%)"}, rows) << '\n';
  for (const auto& t : r.ts) {
    txt << "seed " << t.seed << ": T = " << std::setprecision(4) << t.fit.temperature << ", validation NLL "
        << std::setprecision(6) << t.fit.nll_before << " -> " << t.fit.nll_after << '\n';
  }
  io::write_file_atomic(dir / "table3.txt", txt.str());
}

// ---------------------------------------------------------------------------
// Bounds

struct BoundsResult {
  fs::path checkpoint;
  BoundInputs inputs;
  std::size_t fisher_samples = 0;
  double pac = 0.0;
  double ece = 0.0;
  double train_ece = 0.0;
  std::optional<double> target_error;
  std::optional<double> target_ece;
};

inline double voxel_error_rate(std::span<const std::vector<double>> probs, std::span<const Example> data) {
  std::size_t wrong = 0, n = 0;
  for (std::size_t i = 0; i < data.size(); ++i) {
    for (std::size_t k = 0; k < probs[i].size(); ++k) {
      wrong += (probs[i][k] >= kMaskThreshold) != (data[i].mask.labels[k] != 0);
    }
    n += probs[i].size();
  }
  return static_cast<double>(wrong) / static_cast<double>(n);
}

/// Both bounds for a trained decoder, with every input measured on the
/// training split. `checkpoint` defaults to the first CalSAM seed.
inline BoundsResult bounds(const RootConfig& root, std::optional<fs::path> checkpoint = std::nullopt) {
  root.validate();
  const auto manifest = open_manifest(root);
  const std::string fold = manifest.folds.begin()->first;
  BoundsResult r;
  r.checkpoint = checkpoint.value_or(run_dir(root, fold, Ablation::calsam, root.seeds.front()) / "checkpoint.cspt");
  if (!fs::exists(r.checkpoint)) throw io::IoError("checkpoint '" + r.checkpoint.string() + "' not found; run train first");
  const ModelConfig mcfg = root.train.model();
  const ParamStore p = io::load_checkpoint(r.checkpoint, mcfg);
  const Dataset data = io::load_dataset(data_dir(root), manifest, fold, root);

  const auto probs = predict_probs(p, mcfg, data.train);
  r.inputs.emp_error = voxel_error_rate(probs, data.train);
  r.fisher_samples = std::min(root.bounds.fisher_samples, data.train.size());
  r.inputs.fisher_trace = estimate_fisher_trace(p, mcfg, data.train, r.fisher_samples);
  r.inputs.n = data.train.size();
  r.inputs.delta = root.bounds.delta;
  r.inputs.epsilon = estimate_epsilon(probs);
  r.inputs.c = root.bounds.c;
  r.pac = pac_bayes_bound(r.inputs);
  r.ece = ece_bound(r.inputs);
  std::vector<double> all;
  for (const auto& v : probs) all.insert(all.end(), v.begin(), v.end());
  r.train_ece = calibration_report(all, flat_labels(data.train), root.metrics.bins).ece;
  for (const auto& [role, ex] : data.eval) {
    if (role != synth::Role::target) continue;
    const auto tp = predict_probs(p, mcfg, ex);
    r.target_error = voxel_error_rate(tp, ex);
    std::vector<double> t;
    for (const auto& v : tp) t.insert(t.end(), v.begin(), v.end());
    r.target_ece = calibration_report(t, flat_labels(ex), root.metrics.bins).ece;
  }
  return r;
}

inline json bounds_json(const BoundsResult& r, const std::string& hash) {
  auto opt = [](const std::optional<double>& v) { return v ? json(*v) : json(nullptr); };
  return {
      {"config_hash", hash},
      {"checkpoint", r.checkpoint.string()},
      {"inputs",
       {{"emp_error", r.inputs.emp_error},
        {"emp_error_definition", "voxel error rate of the thresholded mask on the training split"},
        {"fisher_trace", r.inputs.fisher_trace},
        {"fisher_trace_definition", "feature Fisher trace: mean over training volumes of ||dCE/dz||^2"},
        {"fisher_samples", r.fisher_samples},
        {"n", r.inputs.n},
        {"n_definition", "number of training volumes"},
        {"delta", r.inputs.delta},
        {"epsilon", r.inputs.epsilon},
        {"c", r.inputs.c},
        {"c_note", "universal constant of the calibration bound; unspecified, set to 1 by convention"}}},
      {"pac_bayes_bound", r.pac},
      {"ece_bound", r.ece},
      {"measured",
       {{"train_ece", r.train_ece}, {"target_error", opt(r.target_error)}, {"target_ece", opt(r.target_ece)}}},
  };
}

inline void write_bounds(const RootConfig& root, const BoundsResult& r) {
  const fs::path dir = fs::path(root.output) / "bounds";
  const std::string hash = config_hash(root);
  write_config_snapshot(dir, root);
  io::write_file_atomic(dir / "bounds.json", bounds_json(r, hash).dump(2) + "\n");
  std::ostringstream t;
  t << io::hash_line(hash) << std::setprecision(6) << "checkpoint      " << r.checkpoint.string() << '\n'
    << "E_emp           " << r.inputs.emp_error << "  (training voxel error rate)\n"
    << "I (feature)     " << r.inputs.fisher_trace << "  (" << r.fisher_samples << " volumes)\n"
    << "n               " << r.inputs.n << '\n'
    << "delta           " << r.inputs.delta << '\n'
    << "epsilon         " << r.inputs.epsilon << '\n'
    << "C               " << r.inputs.c << "  (unspecified constant, 1 by convention)\n"
    << "PAC-Bayes bound " << r.pac << '\n'
    << "ECE bound       " << r.ece << '\n'
    << "train ECE       " << r.train_ece << '\n';
  if (r.target_error) t << "target error    " << *r.target_error << '\n';
  if (r.target_ece) t << "target ECE      " << *r.target_ece << '\n';
  io::write_file_atomic(dir / "bounds.txt", t.str());
}

// ---------------------------------------------------------------------------
// Verification

struct VerifyReport {
  std::size_t files = 0;
  std::vector<std::string> problems;
  bool ok() const { return problems.empty(); }
};

/// Re-hashes every config snapshot under `root` and checks that each file
/// beside it carries that hash. Volume and mask files are checked against
/// the digests in their manifest.
inline VerifyReport verify(const fs::path& root) {
  VerifyReport rep;
  if (!fs::is_directory(root)) {
    rep.problems.push_back(root.string() + ": not a directory");
    return rep;
  }
  std::vector<fs::path> config_dirs;
  for (const auto& e : fs::recursive_directory_iterator(root)) {
    if (e.is_regular_file() && e.path().filename() == "config.json") config_dirs.push_back(e.path().parent_path());
    if (e.is_regular_file() && e.path().extension() == ".tmp") {
      rep.problems.push_back(e.path().string() + ": leftover partial write");
    }
  }
  if (config_dirs.empty()) rep.problems.push_back(root.string() + ": no config.json found");
  for (const auto& dir : config_dirs) {
    std::string hash;
    try {
      const json j = json::parse(io::read_file(dir / "config.json"));
      hash = j.at("config_hash").get<std::string>();
      const std::string again = config_hash(root_config_from(j));
      if (again != hash) {
        rep.problems.push_back((dir / "config.json").string() + ": recorded hash " + hash + ", recomputed " + again);
      }
    } catch (const std::exception& ex) {
      rep.problems.push_back((dir / "config.json").string() + ": " + ex.what());
      continue;
    }
    std::map<std::string, std::string> digests;
    if (fs::exists(dir / "manifest.tsv")) {
      try {
        for (const auto& e : io::read_manifest(dir).entries) {
          digests[e.volume] = e.volume_fnv;
          digests[e.mask] = e.mask_fnv;
        }
      } catch (const std::exception& ex) {
        rep.problems.push_back(ex.what());
      }
    }
    for (auto it = fs::recursive_directory_iterator(dir); it != fs::recursive_directory_iterator(); ++it) {
      const fs::path p = it->path();
      if (it->is_directory()) {
        if (fs::exists(p / "config.json")) it.disable_recursion_pending();
        continue;
      }
      if (p.filename() == "config.json" || p.extension() == ".tmp") continue;
      ++rep.files;
      const auto ext = p.extension().string();
      try {
        std::string found;
        if (ext == ".csv" || ext == ".tsv" || ext == ".txt") {
          found = io::embedded_hash(io::read_file(p));
        } else if (ext == ".json") {
          found = json::parse(io::read_file(p)).value("config_hash", "");
        } else if (ext == ".cspt") {
          found = io::decode_checkpoint(io::read_file(p), p.string()).config_hash;
        } else if (ext == ".cseg") {
          const auto rel = fs::relative(p, dir).generic_string();
          const auto d = digests.find(rel);
          if (d == digests.end()) {
            rep.problems.push_back(p.string() + ": not listed in a manifest");
          } else if (hex64(fnv1a64(io::read_file(p))) != d->second) {
            rep.problems.push_back(p.string() + ": content digest differs from manifest");
          }
          continue;
        } else {
          rep.problems.push_back(p.string() + ": unrecognised artifact");
          continue;
        }
        if (found != hash) {
          rep.problems.push_back(p.string() + ": carries hash '" + found + "', expected " + hash);
        }
      } catch (const std::exception& ex) {
        rep.problems.push_back(p.string() + ": " + ex.what());
      }
    }
  }
  return rep;
}

}  // namespace calsam::exp
