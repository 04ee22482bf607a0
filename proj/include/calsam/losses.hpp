#pragma once

// Segmentation and regularisation objectives on [N,1,D,H,W] tensors. Truth
// tensors hold 0/1 values and are treated as constants.

#include <cmath>
#include <numbers>
#include <optional>
#include <span>
#include <stdexcept>
#include <string>
#include <vector>

#include "calsam/autodiff.hpp"

namespace calsam {

enum class InnerLoss { cross_entropy, dice };
enum class Reduction { mean, sum };

inline std::string to_string(InnerLoss l) {
  return l == InnerLoss::cross_entropy ? "cross-entropy" : "dice";
}

inline InnerLoss parse_inner_loss(const std::string& s) {
  if (s == "cross-entropy" || s == "ce") return InnerLoss::cross_entropy;
  if (s == "dice") return InnerLoss::dice;
  throw std::invalid_argument("unknown FIP inner loss '" + s + "'");
}

inline constexpr double kProbClamp = 1e-12;
inline constexpr double kDiceSmooth = 1e-6;

struct LossWeights {
  double lambda1 = 0.3;
  double lambda2 = 0.5;
  double tau = std::numbers::ln2;  // CE of a 50% prediction
  double gamma = 0.1;
  InnerLoss fip_inner = InnerLoss::cross_entropy;
  Reduction bce_reduction = Reduction::mean;

  void validate() const {
    if (!(lambda1 >= 0.0) || !(lambda2 >= 0.0)) {
      throw std::invalid_argument("loss weights must be nonnegative");
    }
    if (!(gamma > 0.0)) throw std::invalid_argument("CMP gamma must be positive");
  }
};

namespace detail {

inline void require_pair(const ad::Tensor& a, const ad::Tensor& truth, const char* what) {
  if (a.shape() != truth.shape()) {
    throw std::invalid_argument(std::string(what) + ": prediction shape " + ad::to_string(a.shape()) +
                                " != truth shape " + ad::to_string(truth.shape()));
  }
  if (a.rank() == 0) throw std::invalid_argument(std::string(what) + ": scalar input");
}

inline std::size_t batch_of(const ad::Tensor& t) { return t.rank() >= 4 ? t.shape()[0] : 1; }

}  // namespace detail

/// Per-voxel binary cross-entropy with clamped probabilities.
inline ad::Tensor voxel_cross_entropy(const ad::Tensor& probs, const ad::Tensor& truth) {
  detail::require_pair(probs, truth, "cross-entropy");
  const ad::Tensor m = truth.detach();
  const ad::Tensor p = ad::clamp(probs, kProbClamp, 1.0 - kProbClamp);
  return ad::neg(ad::add(ad::mul(m, ad::log(p)), ad::mul(ad::one_minus(m), ad::log(ad::one_minus(p)))));
}

/// Soft Dice per sample, averaged over the batch. Inputs of rank < 4 are a
/// single sample.
inline ad::Tensor dice_loss(const ad::Tensor& probs, const ad::Tensor& truth) {
  detail::require_pair(probs, truth, "dice_loss");
  const std::size_t n = detail::batch_of(probs);
  const ad::Shape per_sample{n, 1};
  const ad::Tensor p = ad::reshape(probs, {n, probs.size() / n});
  const ad::Tensor m = ad::reshape(truth.detach(), p.shape());
  const ad::Tensor inter = ad::sum_to(ad::mul(p, m), per_sample);
  const ad::Tensor denom = ad::add_scalar(ad::add(ad::sum_to(p, per_sample), ad::sum_to(m, per_sample)),
                                          kDiceSmooth);
  const ad::Tensor ratio = ad::div(ad::add_scalar(ad::scale(inter, 2.0), kDiceSmooth), denom);
  return ad::one_minus(ad::mean(ratio));
}

inline ad::Tensor bce_loss(const ad::Tensor& probs, const ad::Tensor& truth,
                           Reduction reduction = Reduction::mean) {
  detail::require_pair(probs, truth, "bce_loss");
  const ad::Tensor m = truth.detach();
  const ad::Tensor p = ad::clamp(probs, kProbClamp, 1.0 - kProbClamp);
  const ad::Tensor ll = ad::add(ad::mul(m, ad::log(p)), ad::mul(ad::one_minus(m), ad::log(ad::one_minus(p))));
  return ad::neg(reduction == Reduction::mean ? ad::mean(ll) : ad::sum(ll));
}

inline ad::Tensor sam_loss(const ad::Tensor& probs, const ad::Tensor& truth,
                           Reduction reduction = Reduction::mean) {
  return ad::add(dice_loss(probs, truth), bce_loss(probs, truth, reduction));
}

/// Sum over the batch of each sample's inner loss, so the gradient w.r.t. a
/// sample's features is that sample's own per-sample gradient.
inline ad::Tensor fip_inner_loss(const ad::Tensor& logits, const ad::Tensor& truth, InnerLoss inner) {
  const double n = static_cast<double>(detail::batch_of(logits));
  const ad::Tensor probs = ad::sigmoid(logits);
  if (inner == InnerLoss::dice) return ad::scale(dice_loss(probs, truth), n);
  return ad::scale(ad::mean(voxel_cross_entropy(probs, truth)), n);
}

/// Half the batch-mean squared norm of the inner-loss gradient w.r.t. the
/// features. `z` must be a graph leaf and `logits` must be computed from it
/// on the same graph; the result stays differentiable w.r.t. the decoder.
inline ad::Tensor fip_penalty(const ad::Tensor& z, const ad::Tensor& logits, const ad::Tensor& truth,
                              InnerLoss inner = InnerLoss::cross_entropy) {
  if (!z.requires_grad() || !z.is_leaf()) {
    throw std::invalid_argument("fip_penalty: features must be a detached graph leaf");
  }
  const ad::Tensor inner_loss = fip_inner_loss(logits, truth, inner);
  if (inner_loss.graph() != z.graph()) {
    throw std::invalid_argument("fip_penalty: logits are not on the features' graph");
  }
  const ad::Tensor gz = z.graph()->gradient(inner_loss, {z}, /*create_graph=*/true)[0];
  return ad::scale(ad::sum_squares(gz), 0.5 / static_cast<double>(detail::batch_of(z)));
}

/// trace(g g^T) via the explicit outer product.
inline double fisher_trace_oracle(std::span<const double> g) {
  const std::size_t n = g.size();
  std::vector<double> outer(n * n);
  for (std::size_t i = 0; i < n; ++i)
    for (std::size_t j = 0; j < n; ++j) outer[i * n + j] = g[i] * g[j];
  double trace = 0.0;
  for (std::size_t i = 0; i < n; ++i) trace += outer[i * n + i];
  return trace;
}

/// Elementwise sigmoid((l - tau) / gamma).
inline ad::Tensor cmp_surrogate(const ad::Tensor& loss, double tau = std::numbers::ln2, double gamma = 0.1) {
  if (!(gamma > 0.0)) throw std::invalid_argument("CMP gamma must be positive");
  return ad::sigmoid(ad::scale(ad::add_scalar(loss, -tau), 1.0 / gamma));
}

/// Mean over voxels of the surrogate applied to per-voxel cross-entropy.
inline ad::Tensor cmp_penalty(const ad::Tensor& logits, const ad::Tensor& truth,
                              double tau = std::numbers::ln2, double gamma = 0.1) {
  if (!(gamma > 0.0)) throw std::invalid_argument("CMP gamma must be positive");
  return ad::mean(cmp_surrogate(voxel_cross_entropy(ad::sigmoid(logits), truth), tau, gamma));
}

inline ad::Tensor focal_loss(const ad::Tensor& probs, const ad::Tensor& truth, double focus = 2.0) {
  detail::require_pair(probs, truth, "focal_loss");
  if (!(focus >= 0.0)) throw std::invalid_argument("focal focus must be nonnegative");
  const ad::Tensor m = truth.detach();
  const ad::Tensor pt =
      ad::clamp(ad::add(ad::mul(m, probs), ad::mul(ad::one_minus(m), ad::one_minus(probs))), kProbClamp,
                1.0 - kProbClamp);
  return ad::neg(ad::mean(ad::mul(ad::pow(ad::one_minus(pt), focus), ad::log(pt))));
}

struct LossBreakdown {
  ad::Tensor total;
  ad::Tensor sam;
  std::optional<ad::Tensor> fip;  // absent when lambda1 == 0
  std::optional<ad::Tensor> cmp;  // absent when lambda2 == 0
};

/// sam + lambda1 * fip + lambda2 * cmp. Zero-weighted terms are not computed.
inline LossBreakdown calsam_loss(const ad::Tensor& probs, const ad::Tensor& logits, const ad::Tensor& z,
                                 const ad::Tensor& truth, const LossWeights& w) {
  w.validate();
  LossBreakdown out;
  out.sam = sam_loss(probs, truth, w.bce_reduction);
  out.total = out.sam;
  if (w.lambda1 > 0.0) {
    out.fip = fip_penalty(z, logits, truth, w.fip_inner);
    out.total = ad::add(out.total, ad::scale(*out.fip, w.lambda1));
  }
  if (w.lambda2 > 0.0) {
    out.cmp = cmp_penalty(logits, truth, w.tau, w.gamma);
    out.total = ad::add(out.total, ad::scale(*out.cmp, w.lambda2));
  }
  return out;
}

}  // namespace calsam
