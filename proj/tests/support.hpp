#pragma once

// Test-only oracles: central finite differences and relative-error helpers.
// Nothing here calls the autodiff backward pass.

#include <algorithm>
#include <cmath>
#include <functional>
#include <limits>
#include <random>
#include <vector>

#include "calsam/autodiff.hpp"
#include "calsam/metrics.hpp"
#include "calsam/model.hpp"

namespace calsam::testing {

inline constexpr double kFdStep = 1e-5;
inline constexpr double kRelFloor = 1e-8;
// Fourth-order stencil step for loss-level checks: large enough that
// roundoff in O(1) losses stays below 1e-5 of 1e-7-sized gradient entries.
inline constexpr double kStencilStep = 1e-3;

/// Central differences of a scalar function of a flat vector.
inline std::vector<double> numeric_gradient(const std::function<double(const std::vector<double>&)>& f,
                                            std::vector<double> x, double h = kFdStep) {
  std::vector<double> g(x.size());
  for (std::size_t i = 0; i < x.size(); ++i) {
    const double keep = x[i];
    x[i] = keep + h;
    const double up = f(x);
    x[i] = keep - h;
    const double down = f(x);
    x[i] = keep;
    g[i] = (up - down) / (2.0 * h);
  }
  return g;
}

/// Fourth-order central differences,
/// (f(x-2h) - 8 f(x-h) + 8 f(x+h) - f(x+2h)) / 12h.
inline std::vector<double> numeric_gradient5(const std::function<double(const std::vector<double>&)>& f,
                                             std::vector<double> x, double h = kStencilStep) {
  std::vector<double> g(x.size());
  for (std::size_t i = 0; i < x.size(); ++i) {
    const double keep = x[i];
    double v[4];
    int j = 0;
    for (double m : {-2.0, -1.0, 1.0, 2.0}) {
      x[i] = keep + m * h;
      v[j++] = f(x);
    }
    x[i] = keep;
    g[i] = (8.0 * (v[2] - v[1]) - (v[3] - v[0])) / (12.0 * h);
  }
  return g;
}

/// max_i |a_i - b_i| / max(|a_i|, |b_i|, floor)
inline double max_relative_error(const std::vector<double>& a, const std::vector<double>& b,
                                 double floor = kRelFloor) {
  double worst = 0.0;
  for (std::size_t i = 0; i < a.size(); ++i) {
    const double denom = std::max({std::abs(a[i]), std::abs(b[i]), floor});
    worst = std::max(worst, std::abs(a[i] - b[i]) / denom);
  }
  return worst;
}

inline std::vector<double> random_values(std::size_t n, std::mt19937_64& rng, double lo = -1.0,
                                         double hi = 1.0) {
  std::uniform_real_distribution<double> u(lo, hi);
  std::vector<double> v(n);
  for (auto& x : v) x = u(rng);
  return v;
}

inline ad::Tensor random_tensor(const ad::Shape& shape, std::mt19937_64& rng, double lo = -1.0,
                                double hi = 1.0) {
  return ad::Tensor(shape, random_values(ad::element_count(shape), rng, lo, hi));
}

/// Random decoder problem: features from the frozen encoder on a random
/// volume, random binary truth, freshly initialised decoder.
struct DecoderCase {
  ModelConfig cfg;
  ad::Tensor z;
  ad::Tensor truth;
  std::vector<ad::Tensor> phi;
};

/// Smallest |pre-activation| of the decoder's ReLU layer.
inline double relu_margin(const DecoderCase& c) {
  const auto pre = detail::add_channel_bias(ad::conv3d(c.z, c.phi[0], 1, 1), c.phi[1]);
  double m = std::numeric_limits<double>::infinity();
  for (double v : pre.values()) m = std::min(m, std::abs(v));
  return m;
}

/// Largest change of any pre-activation when one decoder parameter moves by
/// `reach`.
inline double relu_reach(const DecoderCase& c, double reach) {
  double zmax = 1.0;
  for (double v : c.z.values()) zmax = std::max(zmax, std::abs(v));
  return reach * zmax;
}

/// Cases are redrawn until no ReLU pre-activation lies within the stencil's
/// reach of zero, so the loss is smooth over every finite-difference probe.
inline DecoderCase make_decoder_case(std::uint64_t seed, std::size_t extent, std::size_t batch = 1,
                                     double reach = 2.0 * kStencilStep) {
  for (std::uint64_t attempt = 0;; ++attempt) {
    std::mt19937_64 rng(synth::mix_seed(seed, attempt));
    DecoderCase c;
    c.cfg.feature_channels = 4;
    c.cfg.decoder_channels = 4;
    const auto params = init_params(c.cfg, seed + 1000 * attempt);
    const ad::Tensor x = random_tensor({batch, 3, extent, extent, extent}, rng, 0.0, 1.0);
    c.z = encode(x, params, c.cfg);
    std::bernoulli_distribution fg(0.35);
    std::vector<double> t(batch * extent * extent * extent);
    for (auto& v : t) v = fg(rng) ? 1.0 : 0.0;
    c.truth = ad::Tensor({batch, 1, extent, extent, extent}, std::move(t));
    c.phi = params.phi_values();
    // Nonzero biases so every bias gradient path is exercised.
    for (std::size_t i : {std::size_t{1}, std::size_t{3}}) {
      c.phi[i] = random_tensor(c.phi[i].shape(), rng, -0.2, 0.2);
    }
    if (relu_margin(c) > 1.5 * relu_reach(c, reach)) return c;
  }
}

/// Loss as a function of (probs, logits, z-leaf, truth).
using DecoderLoss =
    std::function<ad::Tensor(const ad::Tensor&, const ad::Tensor&, const ad::Tensor&, const ad::Tensor&)>;

inline std::vector<double> flatten(const std::vector<ad::Tensor>& ts) {
  std::vector<double> out;
  for (const auto& t : ts) out.insert(out.end(), t.values().begin(), t.values().end());
  return out;
}

inline std::vector<ad::Tensor> unflatten(const std::vector<double>& flat, const std::vector<ad::Tensor>& like) {
  std::vector<ad::Tensor> out;
  std::size_t off = 0;
  for (const auto& t : like) {
    out.emplace_back(t.shape(), std::vector<double>(flat.begin() + static_cast<std::ptrdiff_t>(off),
                                                    flat.begin() + static_cast<std::ptrdiff_t>(off + t.size())));
    off += t.size();
  }
  return out;
}

inline double evaluate_decoder_loss(const DecoderCase& c, const std::vector<ad::Tensor>& phi,
                                    const DecoderLoss& loss) {
  ad::Graph g;
  const ad::Tensor z = g.leaf(c.z);
  std::vector<ad::Tensor> leaves;
  for (const auto& p : phi) leaves.push_back(g.leaf(p));
  const ad::Tensor logits = decode(z, leaves, c.cfg);
  return loss(ad::sigmoid(logits), logits, z, c.truth).item();
}

/// Roundoff bound of a fourth-order difference quotient of a function of
/// magnitude `f_abs`.
inline double stencil_noise(double f_abs, double h = kStencilStep) {
  return 32.0 * std::numeric_limits<double>::epsilon() * std::max(f_abs, 1.0) / h;
}

/// Max relative error between the backward pass and fourth-order central
/// differences, over every decoder parameter. Denominators are floored so
/// that entries below the oracle's resolution (stencil_noise) are compared in
/// absolute terms: the result is below `rtol` iff every entry satisfies
/// |a - n| < max(rtol * max(|a|, |n|), stencil_noise).
inline double decoder_gradient_error(const DecoderCase& c, const DecoderLoss& loss, double rtol,
                                     double h = kStencilStep) {
  ad::Graph g;
  const ad::Tensor z = g.leaf(c.z);
  std::vector<ad::Tensor> leaves;
  for (const auto& p : c.phi) leaves.push_back(g.leaf(p));
  const ad::Tensor logits = decode(z, leaves, c.cfg);
  const ad::Tensor value = loss(ad::sigmoid(logits), logits, z, c.truth);
  const std::vector<double> analytic = flatten(ad::backward(value, leaves));
  double f_abs = std::abs(value.item());
  const std::vector<double> numeric = numeric_gradient5(
      [&](const std::vector<double>& flat) {
        const double v = evaluate_decoder_loss(c, unflatten(flat, c.phi), loss);
        f_abs = std::max(f_abs, std::abs(v));
        return v;
      },
      flatten(c.phi), h);
  return max_relative_error(analytic, numeric, std::max(kRelFloor, stencil_noise(f_abs, h) / rtol));
}

// All-pairs reference: boundary extraction by direct neighbour test, then
// nearest boundary voxel by exhaustive search.
inline double hd95_brute(const SegMask& a, const SegMask& b, const Spacing& s) {
  auto boundary = [](const SegMask& m) {
    std::vector<Voxel> out;
    const auto& d = m.dims;
    for (std::size_t z = 0; z < d.nz; ++z)
      for (std::size_t y = 0; y < d.ny; ++y)
        for (std::size_t x = 0; x < d.nx; ++x) {
          if (!m.at(x, y, z)) continue;
          bool edge = x == 0 || y == 0 || z == 0 || x + 1 == d.nx || y + 1 == d.ny || z + 1 == d.nz;
          if (!edge) {
            edge = !m.at(x - 1, y, z) || !m.at(x + 1, y, z) || !m.at(x, y - 1, z) || !m.at(x, y + 1, z) ||
                   !m.at(x, y, z - 1) || !m.at(x, y, z + 1);
          }
          if (edge) out.push_back({x, y, z});
        }
    return out;
  };
  const auto ba = boundary(a), bb = boundary(b);
  auto nearest = [&](const Voxel& p, const std::vector<Voxel>& set) {
    double best = std::numeric_limits<double>::infinity();
    for (const auto& q : set) {
      const double dx = (double(p.x) - double(q.x)) * s[0], dy = (double(p.y) - double(q.y)) * s[1],
                   dz = (double(p.z) - double(q.z)) * s[2];
      best = std::min(best, std::sqrt(dx * dx + dy * dy + dz * dz));
    }
    return best;
  };
  std::vector<double> all;
  for (const auto& p : ba) all.push_back(nearest(p, bb));
  for (const auto& p : bb) all.push_back(nearest(p, ba));
  std::sort(all.begin(), all.end());
  const double pos = 0.95 * double(all.size() - 1);
  const auto lo = std::size_t(pos);
  const auto hi = std::min(lo + 1, all.size() - 1);
  return all[lo] * (1.0 - (pos - double(lo))) + all[hi] * (pos - double(lo));
}

}  // namespace calsam::testing
