#pragma once

// Decoder training: one step per mini-batch with the encoder frozen, Adam on
// phi only, cosine learning-rate decay.

#include <algorithm>
#include <chrono>
#include <cmath>
#include <numbers>
#include <optional>
#include <random>
#include <span>
#include <stdexcept>
#include <string>
#include <vector>

#include "calsam/autodiff.hpp"
#include "calsam/losses.hpp"
#include "calsam/metrics.hpp"
#include "calsam/model.hpp"
#include "calsam/synthdata.hpp"

namespace calsam {

enum class Ablation { sam_ft, fip_only, cmp_only, calsam, focal };

inline std::string to_string(Ablation a) {
  switch (a) {
    case Ablation::sam_ft: return "sam-ft";
    case Ablation::fip_only: return "fip-only";
    case Ablation::cmp_only: return "cmp-only";
    case Ablation::calsam: return "calsam";
    case Ablation::focal: return "focal";
  }
  return "?";
}

inline Ablation parse_ablation(const std::string& s) {
  for (auto a : {Ablation::sam_ft, Ablation::fip_only, Ablation::cmp_only, Ablation::calsam, Ablation::focal}) {
    if (s == to_string(a)) return a;
  }
  throw std::invalid_argument("unknown ablation '" + s + "'");
}

/// Table row label.
inline std::string display_name(Ablation a) {
  switch (a) {
    case Ablation::sam_ft: return "SAM-FT";
    case Ablation::fip_only: return "SAM+FIP";
    case Ablation::cmp_only: return "SAM+CMP";
    case Ablation::calsam: return "CalSAM";
    case Ablation::focal: return "+Focal";
  }
  return "?";
}

inline constexpr Ablation kAblationGrid[] = {Ablation::sam_ft, Ablation::fip_only, Ablation::cmp_only,
                                             Ablation::calsam};
inline constexpr std::uint64_t kDefaultSeeds[] = {42, 2024, 3407};

struct TrainConfig {
  Ablation ablation = Ablation::calsam;
  LossWeights weights;
  double lr0 = 3e-2;  // reference setup uses 1e-4 over 100 epochs on 128^3 volumes
  int epochs = 30;
  std::size_t batch_size = 2;
  double beta1 = 0.9;
  double beta2 = 0.999;
  double adam_eps = 1e-8;
  std::uint64_t seed = 42;
  bool guided = true;
  Extents volume_shape{32, 32, 32};
  std::optional<double> clip_norm;  // global max-norm; off by default
  double focal_focus = 2.0;

  void validate() const {
    if (!(lr0 > 0.0)) throw std::invalid_argument("lr0 must be positive");
    if (epochs < 1) throw std::invalid_argument("epochs must be at least 1");
    if (batch_size < 1) throw std::invalid_argument("batch size must be at least 1");
    if (!(beta1 >= 0.0 && beta1 < 1.0) || !(beta2 >= 0.0 && beta2 < 1.0)) {
      throw std::invalid_argument("Adam betas must lie in [0,1)");
    }
    if (!(adam_eps > 0.0)) throw std::invalid_argument("Adam epsilon must be positive");
    if (clip_norm && !(*clip_norm > 0.0)) throw std::invalid_argument("clip norm must be positive");
    weights.validate();
  }

  ModelConfig model() const {
    ModelConfig m;
    m.guided = guided;
    return m;
  }
};

/// The loss weights actually used: the ablation zeroes its switched-off terms.
inline LossWeights effective_weights(const TrainConfig& cfg) {
  LossWeights w = cfg.weights;
  switch (cfg.ablation) {
    case Ablation::sam_ft:
    case Ablation::focal: w.lambda1 = w.lambda2 = 0.0; break;
    case Ablation::fip_only: w.lambda2 = 0.0; break;
    case Ablation::cmp_only: w.lambda1 = 0.0; break;
    case Ablation::calsam: break;
  }
  return w;
}

/// lr0 * (1 + cos(pi * step / total)) / 2
inline double cosine_lr(std::size_t step, std::size_t total, double lr0) {
  if (total == 0) throw std::invalid_argument("cosine_lr: total steps must be positive");
  if (step > total) {
    throw std::out_of_range("cosine_lr: step " + std::to_string(step) + " outside [0, " + std::to_string(total) + "]");
  }
  return lr0 * 0.5 * (1.0 + std::cos(std::numbers::pi * static_cast<double>(step) / static_cast<double>(total)));
}

class Adam {
 public:
  Adam(double beta1, double beta2, double eps) : b1_(beta1), b2_(beta2), eps_(eps) {}

  std::size_t steps() const { return t_; }

  /// One bias-corrected update of every tensor in `params`.
  std::vector<ad::Tensor> update(std::span<const ad::Tensor> params, std::span<const ad::Tensor> grads, double lr) {
    if (params.size() != grads.size()) throw std::invalid_argument("Adam: parameter/gradient count mismatch");
    if (m_.empty()) {
      for (const auto& p : params) {
        m_.emplace_back(p.size(), 0.0);
        v_.emplace_back(p.size(), 0.0);
      }
    }
    if (m_.size() != params.size()) throw std::invalid_argument("Adam: parameter set changed");
    ++t_;
    const double c1 = 1.0 - std::pow(b1_, static_cast<double>(t_));
    const double c2 = 1.0 - std::pow(b2_, static_cast<double>(t_));
    std::vector<ad::Tensor> out;
    for (std::size_t i = 0; i < params.size(); ++i) {
      const auto p = params[i].values();
      const auto g = grads[i].values();
      if (g.size() != p.size()) throw std::invalid_argument("Adam: gradient shape mismatch");
      std::vector<double> next(p.begin(), p.end());
      auto& m = m_[i];
      auto& v = v_[i];
      for (std::size_t k = 0; k < next.size(); ++k) {
        m[k] = b1_ * m[k] + (1.0 - b1_) * g[k];
        v[k] = b2_ * v[k] + (1.0 - b2_) * g[k] * g[k];
        next[k] -= lr * (m[k] / c1) / (std::sqrt(v[k] / c2) + eps_);
      }
      out.emplace_back(params[i].shape(), std::move(next));
    }
    return out;
  }

 private:
  double b1_, b2_, eps_;
  std::size_t t_ = 0;
  std::vector<std::vector<double>> m_, v_;
};

/// Raised when a loss term evaluates to NaN or infinity.
class NonFiniteLoss : public std::runtime_error {
 public:
  NonFiniteLoss(const std::string& component, double value)
      : std::runtime_error("non-finite " + component + " loss (" + std::to_string(value) + ")"),
        component_(component) {}
  const std::string& component() const { return component_; }

 private:
  std::string component_;
};

struct Batch {
  ad::Tensor x;      // [N, C, D, H, W]
  ad::Tensor truth;  // [N, 1, D, H, W]
};

inline Batch make_batch(std::span<const Example> data, std::span<const std::size_t> idx) {
  std::vector<ad::Tensor> xs, ts;
  for (auto i : idx) {
    xs.push_back(data[i].input);
    ts.push_back(data[i].truth);
  }
  return {stack_batch(xs), stack_batch(ts)};
}

/// Loss values of one step. Absent terms are zero.
struct StepLoss {
  double total = 0.0;
  double sam = 0.0;
  double fip = 0.0;
  double cmp = 0.0;
};

struct StepGradients {
  StepLoss loss;
  std::vector<ad::Tensor> grads;  // one per phi tensor
};

/// Loss and d(loss)/d(phi) at the current parameters. The encoder runs
/// unrecorded; its output becomes a fresh leaf so the feature penalty can
/// differentiate through d(inner)/dz.
inline StepGradients loss_and_gradients(const Batch& b, const ParamStore& params, const ModelConfig& mcfg,
                                        const LossWeights& w, Ablation ablation, double focal_focus = 2.0) {
  const ad::Tensor z_value = encode(b.x, params, mcfg);
  ad::Graph g;
  const ad::Tensor z = g.leaf(z_value);
  std::vector<ad::Tensor> phi;
  for (const auto& p : params.phi()) phi.push_back(g.leaf(p.value));
  const ad::Tensor logits = decode(z, phi, mcfg);
  const ad::Tensor probs = ad::sigmoid(logits);

  ad::Tensor total;
  StepGradients out;
  if (ablation == Ablation::focal) {
    total = ad::add(dice_loss(probs, b.truth), focal_loss(probs, b.truth, focal_focus));
    out.loss.sam = total.item();
  } else {
    const LossBreakdown lb = calsam_loss(probs, logits, z, b.truth, w);
    total = lb.total;
    out.loss.sam = lb.sam.item();
    if (lb.fip) out.loss.fip = lb.fip->item();
    if (lb.cmp) out.loss.cmp = lb.cmp->item();
  }
  out.loss.total = total.item();
  for (auto [name, v] : {std::pair{"sam", out.loss.sam}, std::pair{"fip", out.loss.fip},
                         std::pair{"cmp", out.loss.cmp}, std::pair{"total", out.loss.total}}) {
    if (!std::isfinite(v)) throw NonFiniteLoss(name, v);
  }
  out.grads = g.gradient(total, phi, false);
  return out;
}

inline double global_norm(std::span<const ad::Tensor> ts) {
  double s = 0.0;
  for (const auto& t : ts)
    for (double v : t.values()) s += v * v;
  return std::sqrt(s);
}

struct StepResult {
  StepLoss loss;
  double grad_norm = 0.0;
  bool clipped = false;
};

/// One optimisation step on `params` (phi only).
inline StepResult train_step(const Batch& b, ParamStore& params, const TrainConfig& cfg, Adam& opt, double lr) {
  const auto sg = loss_and_gradients(b, params, cfg.model(), effective_weights(cfg), cfg.ablation, cfg.focal_focus);
  StepResult r;
  r.loss = sg.loss;
  r.grad_norm = global_norm(sg.grads);
  if (!std::isfinite(r.grad_norm)) throw NonFiniteLoss("gradient", r.grad_norm);
  std::vector<ad::Tensor> grads = sg.grads;
  if (cfg.clip_norm && r.grad_norm > *cfg.clip_norm) {
    const double k = *cfg.clip_norm / r.grad_norm;
    for (auto& gr : grads) gr = ad::scale(gr, k);
    r.clipped = true;
  }
  const auto next = opt.update(params.phi_values(), grads, lr);
  for (std::size_t i = 0; i < next.size(); ++i) params.set_phi(i, next[i]);
  return r;
}

// ---------------------------------------------------------------------------
// Runs

struct EpochLoss {
  int epoch = 0;
  StepLoss mean;  // averaged over the epoch's steps
};

struct SplitResult {
  synth::Role role = synth::Role::target;
  std::vector<MetricsRow> rows;
  SplitSummary summary;
  CalibrationReport pooled;  // all voxels of the split
};

struct RunRecord {
  TrainConfig config;
  std::vector<EpochLoss> epochs;
  std::vector<StepLoss> steps;
  std::vector<double> step_seconds;
  std::size_t clipped_steps = 0;
  ParamStore params;
  std::vector<SplitResult> splits;  // source, target, motion when present

  const SplitResult* split(synth::Role r) const {
    for (const auto& s : splits)
      if (s.role == r) return &s;
    return nullptr;
  }
  /// source - target for the chosen summary metric; nullopt without both.
  std::optional<double> dgg_dsc() const {
    const auto *s = split(synth::Role::source), *t = split(synth::Role::target);
    if (!s || !t) return std::nullopt;
    return dgg(s->summary.dsc.mean, t->summary.dsc.mean);
  }
  std::optional<double> dgg_ece() const {
    const auto *s = split(synth::Role::source), *t = split(synth::Role::target);
    if (!s || !t) return std::nullopt;
    return dgg(s->summary.ece.mean, t->summary.ece.mean);
  }
};

inline std::vector<Example> materialize(std::span<const synth::SampleSpec> specs, const Extents& dims,
                                        const synth::SynthParams& sp, bool guided) {
  std::vector<Example> out;
  out.reserve(specs.size());
  for (const auto& s : specs) out.push_back(prepare_example(s.id, synth::generate_sample(s.seed, dims, s.domain, sp), guided));
  return out;
}

/// Sigmoid probabilities for every example, flattened x fastest.
inline std::vector<std::vector<double>> predict_probs(const ParamStore& params, const ModelConfig& mcfg,
                                                      std::span<const Example> data) {
  std::vector<std::vector<double>> out;
  for (const auto& e : data) out.push_back(ad::sigmoid(predict_logits(e.input, params, mcfg)).to_vector());
  return out;
}

inline SplitResult evaluate_split(synth::Role role, std::span<const Example> data,
                                  std::span<const std::vector<double>> probs, std::size_t bins) {
  SplitResult r;
  r.role = role;
  std::vector<double> all_p;
  std::vector<std::uint8_t> all_y;
  for (std::size_t i = 0; i < data.size(); ++i) {
    r.rows.push_back(evaluate_sample(data[i].id, data[i].domain, probs[i], data[i].mask, data[i].spacing, bins));
    all_p.insert(all_p.end(), probs[i].begin(), probs[i].end());
    all_y.insert(all_y.end(), data[i].mask.labels.begin(), data[i].mask.labels.end());
  }
  r.summary = summarize(r.rows);
  if (!all_p.empty()) r.pooled = calibration_report(all_p, all_y, bins);
  return r;
}

struct Dataset {
  std::vector<Example> train;
  std::vector<std::pair<synth::Role, std::vector<Example>>> eval;  // source, target, motion
};

inline Dataset load_fold(const synth::Fold& fold, const Extents& dims, const synth::SynthParams& sp, bool guided) {
  Dataset d;
  d.train = materialize(fold.with_role(synth::Role::train), dims, sp, guided);
  for (auto role : {synth::Role::source, synth::Role::target, synth::Role::motion}) {
    auto specs = fold.with_role(role);
    if (!specs.empty()) d.eval.emplace_back(role, materialize(specs, dims, sp, guided));
  }
  if (d.train.empty()) throw std::invalid_argument("fold '" + fold.name + "' has no training samples");
  return d;
}

/// Trains a fresh decoder on `data.train` and evaluates every held-out
/// split. Sequential and deterministic in (config, data).
inline RunRecord run_experiment(const TrainConfig& cfg, const Dataset& data, std::size_t bins = kDefaultBins) {
  cfg.validate();
  const ModelConfig mcfg = cfg.model();
  RunRecord rec{cfg, {}, {}, {}, 0, init_params(mcfg, cfg.seed), {}};
  Adam opt(cfg.beta1, cfg.beta2, cfg.adam_eps);
  const std::size_t n = data.train.size();
  const std::size_t per_epoch = (n + cfg.batch_size - 1) / cfg.batch_size;
  const std::size_t total = per_epoch * static_cast<std::size_t>(cfg.epochs);
  std::vector<std::size_t> order(n);
  std::size_t step = 0;
  for (int epoch = 0; epoch < cfg.epochs; ++epoch) {
    for (std::size_t i = 0; i < n; ++i) order[i] = i;
    std::mt19937_64 rng(synth::mix_seed(cfg.seed, 0xe90c0000ULL + static_cast<std::uint64_t>(epoch)));
    std::shuffle(order.begin(), order.end(), rng);
    EpochLoss el{epoch, {}};
    for (std::size_t b = 0; b < per_epoch; ++b) {
      const auto first = b * cfg.batch_size;
      const auto idx = std::span(order).subspan(first, std::min(cfg.batch_size, n - first));
      const Batch batch = make_batch(data.train, idx);
      const auto t0 = std::chrono::steady_clock::now();
      const StepResult r = train_step(batch, rec.params, cfg, opt, cosine_lr(step, total, cfg.lr0));
      rec.step_seconds.push_back(std::chrono::duration<double>(std::chrono::steady_clock::now() - t0).count());
      rec.steps.push_back(r.loss);
      if (r.clipped) ++rec.clipped_steps;
      el.mean.total += r.loss.total;
      el.mean.sam += r.loss.sam;
      el.mean.fip += r.loss.fip;
      el.mean.cmp += r.loss.cmp;
      ++step;
    }
    const double k = 1.0 / static_cast<double>(per_epoch);
    el.mean = {el.mean.total * k, el.mean.sam * k, el.mean.fip * k, el.mean.cmp * k};
    rec.epochs.push_back(el);
  }
  for (const auto& [role, examples] : data.eval) {
    const auto probs = predict_probs(rec.params, mcfg, examples);
    rec.splits.push_back(evaluate_split(role, examples, probs, bins));
  }
  return rec;
}

struct OverheadResult {
  double ratio = 0.0;
  double median_with = 0.0;     // seconds per step
  double median_without = 0.0;
  std::size_t steps = 0;
};

inline double median(std::vector<double> v) {
  if (v.empty()) throw std::invalid_argument("median of empty sequence");
  std::sort(v.begin(), v.end());
  const std::size_t m = v.size() / 2;
  return v.size() % 2 ? v[m] : 0.5 * (v[m - 1] + v[m]);
}

/// Median step time of `with` over `without`. Both configs train from the
/// same initialisation on the same batches; steps alternate between the two
/// so slow drift in machine load affects both alike.
inline OverheadResult measure_overhead(const TrainConfig& with, const TrainConfig& without,
                                       std::span<const Example> data, std::size_t steps = 100,
                                       std::size_t warmup = 10) {
  if (steps < 1) throw std::invalid_argument("measure_overhead needs at least one timed step");
  if (data.empty()) throw std::invalid_argument("measure_overhead needs data");
  struct Arm {
    const TrainConfig& cfg;
    ParamStore params;
    Adam opt;
    std::vector<double> times;
  };
  Arm arms[2] = {{with, init_params(with.model(), with.seed), Adam(with.beta1, with.beta2, with.adam_eps), {}},
                 {without, init_params(without.model(), without.seed),
                  Adam(without.beta1, without.beta2, without.adam_eps), {}}};
  const std::size_t bs = std::min(with.batch_size, data.size());
  std::vector<std::size_t> idx(bs);
  for (std::size_t s = 0; s < warmup + steps; ++s) {
    for (std::size_t k = 0; k < bs; ++k) idx[k] = (s * bs + k) % data.size();
    const Batch batch = make_batch(data, idx);
    for (auto& a : arms) {
      const auto t0 = std::chrono::steady_clock::now();
      train_step(batch, a.params, a.cfg, a.opt, a.cfg.lr0);
      const double dt = std::chrono::duration<double>(std::chrono::steady_clock::now() - t0).count();
      if (s >= warmup) a.times.push_back(dt);
    }
  }
  OverheadResult r;
  r.median_with = median(arms[0].times);
  r.median_without = median(arms[1].times);
  r.ratio = r.median_with / r.median_without;
  r.steps = steps;
  return r;
}

}  // namespace calsam
