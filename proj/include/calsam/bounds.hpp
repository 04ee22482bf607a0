#pragma once

// Generalisation and calibration bounds from measured quantities.

#include <cmath>
#include <functional>
#include <limits>
#include <span>
#include <stdexcept>
#include <string>
#include <vector>

#include "calsam/autodiff.hpp"
#include "calsam/losses.hpp"
#include "calsam/model.hpp"

namespace calsam {

struct BoundInputs {
  double emp_error = 0.0;
  double fisher_trace = 0.0;  // feature Fisher trace
  std::size_t n = 1;
  double delta = 0.05;
  double epsilon = 0.0;
  double c = 1.0;  // universal constant of the calibration bound, by convention

  void validate() const {
    if (n < 1) throw std::invalid_argument("bound inputs: n must be at least 1");
    if (!(delta > 0.0 && delta < 1.0)) {
      throw std::invalid_argument("bound inputs: delta must lie in (0,1), got " + std::to_string(delta));
    }
    if (!(emp_error >= 0.0) || !(fisher_trace >= 0.0) || !(epsilon >= 0.0)) {
      throw std::invalid_argument("bound inputs: error, Fisher trace and epsilon must be nonnegative");
    }
    if (!(c > 0.0)) throw std::invalid_argument("bound inputs: C must be positive");
  }
};

/// E_emp + sqrt((I/2 + ln(1/delta)) / 2n)
inline double pac_bayes_bound(const BoundInputs& b) {
  b.validate();
  return b.emp_error + std::sqrt((0.5 * b.fisher_trace + std::log(1.0 / b.delta)) / (2.0 * static_cast<double>(b.n)));
}

/// sqrt(I/n) + epsilon + C ln(1/delta) / n
inline double ece_bound(const BoundInputs& b) {
  b.validate();
  const double n = static_cast<double>(b.n);
  return std::sqrt(b.fisher_trace / n) + b.epsilon + b.c * std::log(1.0 / b.delta) / n;
}

/// ||d CE / dz||^2 for one sample, where `head` maps the feature leaf to
/// logits.
inline double sample_fisher_trace(const ad::Tensor& z_value, const std::function<ad::Tensor(const ad::Tensor&)>& head,
                                  const ad::Tensor& truth) {
  ad::Graph g;
  const ad::Tensor z = g.leaf(z_value);
  const ad::Tensor logits = head(z);
  const ad::Tensor inner = fip_inner_loss(logits, truth, InnerLoss::cross_entropy);
  if (inner.graph() == nullptr) return 0.0;  // output does not depend on anything recorded
  return ad::sum_squares(g.gradient(inner, {z}, false)[0]).item();
}

/// Mean over the first `max_samples` examples of the per-sample feature
/// Fisher trace, in dataset order.
inline double estimate_fisher_trace(const ParamStore& params, const ModelConfig& cfg, std::span<const Example> data,
                                    std::size_t max_samples = std::numeric_limits<std::size_t>::max()) {
  if (data.empty()) throw std::invalid_argument("estimate_fisher_trace: empty dataset");
  const std::size_t n = std::min(max_samples, data.size());
  if (n == 0) throw std::invalid_argument("estimate_fisher_trace: max_samples is zero");
  std::vector<ad::Tensor> phi;
  for (const auto& p : params.phi()) phi.push_back(p.value.detach());
  double acc = 0.0;
  for (std::size_t i = 0; i < n; ++i) {
    const ad::Tensor z = encode(data[i].input, params, cfg);
    acc += sample_fisher_trace(z, [&](const ad::Tensor& leaf) { return decode(leaf, phi, cfg); }, data[i].truth);
  }
  return acc / static_cast<double>(n);
}

/// Mean of (P(other class) - P(predicted class))^2 = (1 - 2 max(p, 1-p))^2
/// over all voxels of all samples.
inline double estimate_epsilon(std::span<const std::vector<double>> probs) {
  if (probs.empty()) throw std::invalid_argument("estimate_epsilon: empty dataset");
  double acc = 0.0;
  std::size_t count = 0;
  for (const auto& sample : probs) {
    for (double p : sample) {
      const double top = std::max(p, 1.0 - p);
      const double gap = (1.0 - top) - top;
      acc += gap * gap;
    }
    count += sample.size();
  }
  if (count == 0) throw std::invalid_argument("estimate_epsilon: no voxels");
  return acc / static_cast<double>(count);
}

inline double estimate_epsilon(const ParamStore& params, const ModelConfig& cfg, std::span<const Example> data) {
  if (data.empty()) throw std::invalid_argument("estimate_epsilon: empty dataset");
  std::vector<std::vector<double>> probs;
  for (const auto& e : data) probs.push_back(ad::sigmoid(predict_logits(e.input, params, cfg)).to_vector());
  return estimate_epsilon(probs);
}

}  // namespace calsam
