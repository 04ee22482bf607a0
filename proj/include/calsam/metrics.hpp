#pragma once

// Segmentation and calibration metrics on flat voxel streams and masks.

#include <algorithm>
#include <cmath>
#include <cstdint>
#include <limits>
#include <numeric>
#include <optional>
#include <span>
#include <stdexcept>
#include <string>
#include <vector>

#include "calsam/volume.hpp"

namespace calsam {

inline constexpr std::size_t kDefaultBins = 15;
inline constexpr double kMaskThreshold = 0.5;

namespace detail {

inline void require_same_dims(const SegMask& a, const SegMask& b, const char* what) {
  if (!(a.dims == b.dims) || a.labels.size() != b.labels.size()) {
    throw std::invalid_argument(std::string(what) + ": mask extents " + to_string(a.dims) + " vs " +
                                to_string(b.dims));
  }
}

inline void require_same_length(std::size_t a, std::size_t b, const char* what) {
  if (a != b) {
    throw std::invalid_argument(std::string(what) + ": length mismatch " + std::to_string(a) + " vs " +
                                std::to_string(b));
  }
}

}  // namespace detail

inline double dsc(const SegMask& pred, const SegMask& truth) {
  detail::require_same_dims(pred, truth, "dsc");
  std::size_t p = 0, t = 0, both = 0;
  for (std::size_t i = 0; i < pred.labels.size(); ++i) {
    const bool a = pred.labels[i] != 0, b = truth.labels[i] != 0;
    p += a;
    t += b;
    both += a && b;
  }
  if (p + t == 0) return 1.0;
  return 2.0 * static_cast<double>(both) / static_cast<double>(p + t);
}

inline SegMask threshold_mask(std::span<const double> probs, const Extents& dims,
                              double threshold = kMaskThreshold) {
  detail::require_same_length(probs.size(), dims.voxels(), "threshold_mask");
  SegMask m(dims);
  for (std::size_t i = 0; i < probs.size(); ++i) m.labels[i] = probs[i] >= threshold ? 1 : 0;
  return m;
}

/// Foreground voxels with at least one 6-neighbour in the background.
/// Neighbours outside the grid count as background.
inline std::vector<Voxel> boundary_voxels(const SegMask& m) {
  const auto& d = m.dims;
  std::vector<Voxel> out;
  auto bg = [&](std::size_t x, std::size_t y, std::size_t z, int dx, int dy, int dz) {
    const auto nx = static_cast<std::ptrdiff_t>(x) + dx, ny = static_cast<std::ptrdiff_t>(y) + dy,
               nz = static_cast<std::ptrdiff_t>(z) + dz;
    if (nx < 0 || ny < 0 || nz < 0 || nx >= static_cast<std::ptrdiff_t>(d.nx) ||
        ny >= static_cast<std::ptrdiff_t>(d.ny) || nz >= static_cast<std::ptrdiff_t>(d.nz)) {
      return true;
    }
    return m.at(static_cast<std::size_t>(nx), static_cast<std::size_t>(ny), static_cast<std::size_t>(nz)) == 0;
  };
  for (std::size_t z = 0; z < d.nz; ++z)
    for (std::size_t y = 0; y < d.ny; ++y)
      for (std::size_t x = 0; x < d.nx; ++x) {
        if (!m.at(x, y, z)) continue;
        if (bg(x, y, z, -1, 0, 0) || bg(x, y, z, 1, 0, 0) || bg(x, y, z, 0, -1, 0) || bg(x, y, z, 0, 1, 0) ||
            bg(x, y, z, 0, 0, -1) || bg(x, y, z, 0, 0, 1)) {
          out.push_back({x, y, z});
        }
      }
  return out;
}

namespace detail {

// Lower envelope of parabolas (Felzenszwalb & Huttenlocher) on a line of
// samples at positions i * step.
inline void squared_distance_1d(std::vector<double>& f, std::size_t n, std::size_t stride, double* base,
                                double step, std::vector<double>& out, std::vector<std::size_t>& v,
                                std::vector<double>& zb) {
  constexpr double inf = std::numeric_limits<double>::infinity();
  f.resize(n);
  out.resize(n);
  v.resize(n);
  zb.resize(n + 1);
  for (std::size_t i = 0; i < n; ++i) f[i] = base[i * stride];
  std::size_t k = 0;
  std::size_t first = n;
  for (std::size_t i = 0; i < n; ++i) {
    if (f[i] < inf) {
      first = i;
      break;
    }
  }
  if (first == n) return;  // no sites on this line
  v[0] = first;
  zb[0] = -inf;
  zb[1] = inf;
  auto intersect = [&](std::size_t q, std::size_t r) {
    const double pq = static_cast<double>(q) * step, pr = static_cast<double>(r) * step;
    return ((f[q] + pq * pq) - (f[r] + pr * pr)) / (2.0 * (pq - pr));
  };
  for (std::size_t q = first + 1; q < n; ++q) {
    if (!(f[q] < inf)) continue;
    double s = intersect(q, v[k]);
    while (s <= zb[k]) s = intersect(q, v[--k]);
    ++k;
    v[k] = q;
    zb[k] = s;
    zb[k + 1] = inf;
  }
  k = 0;
  for (std::size_t q = 0; q < n; ++q) {
    const double pq = static_cast<double>(q) * step;
    while (zb[k + 1] < pq) ++k;
    const double dv = pq - static_cast<double>(v[k]) * step;
    out[q] = dv * dv + f[v[k]];
  }
  for (std::size_t i = 0; i < n; ++i) base[i * stride] = out[i];
}

}  // namespace detail

/// Exact squared Euclidean distance (mm^2) from every voxel to the nearest
/// site. Infinity everywhere if there are no sites.
inline std::vector<double> squared_distance_transform(const Extents& d, const std::vector<Voxel>& sites,
                                                      const Spacing& spacing) {
  std::vector<double> g(d.voxels(), std::numeric_limits<double>::infinity());
  for (const auto& s : sites) g[d.index(s.x, s.y, s.z)] = 0.0;
  std::vector<double> f, out, zb;
  std::vector<std::size_t> v;
  for (std::size_t z = 0; z < d.nz; ++z)
    for (std::size_t y = 0; y < d.ny; ++y)
      detail::squared_distance_1d(f, d.nx, 1, &g[d.index(0, y, z)], spacing[0], out, v, zb);
  for (std::size_t z = 0; z < d.nz; ++z)
    for (std::size_t x = 0; x < d.nx; ++x)
      detail::squared_distance_1d(f, d.ny, d.nx, &g[d.index(x, 0, z)], spacing[1], out, v, zb);
  for (std::size_t y = 0; y < d.ny; ++y)
    for (std::size_t x = 0; x < d.nx; ++x)
      detail::squared_distance_1d(f, d.nz, d.nx * d.ny, &g[d.index(x, y, 0)], spacing[2], out, v, zb);
  return g;
}

/// Linear-interpolation percentile (q in [0,100]) of unsorted values.
inline double percentile(std::vector<double> values, double q) {
  if (values.empty()) throw std::invalid_argument("percentile of an empty set");
  std::sort(values.begin(), values.end());
  const double pos = q / 100.0 * static_cast<double>(values.size() - 1);
  const auto lo = static_cast<std::size_t>(std::floor(pos));
  const std::size_t hi = std::min(lo + 1, values.size() - 1);
  return values[lo] + (pos - static_cast<double>(lo)) * (values[hi] - values[lo]);
}

/// 95th percentile of the pooled boundary-to-boundary distances in both
/// directions, in mm. nullopt when either mask is empty.
inline std::optional<double> hd95(const SegMask& pred, const SegMask& truth, const Spacing& spacing) {
  detail::require_same_dims(pred, truth, "hd95");
  const auto bp = boundary_voxels(pred), bt = boundary_voxels(truth);
  if (bp.empty() || bt.empty()) return std::nullopt;
  const auto dt = squared_distance_transform(truth.dims, bt, spacing);
  const auto dp = squared_distance_transform(pred.dims, bp, spacing);
  std::vector<double> pooled;
  pooled.reserve(bp.size() + bt.size());
  for (const auto& v : bp) pooled.push_back(std::sqrt(dt[truth.dims.index(v.x, v.y, v.z)]));
  for (const auto& v : bt) pooled.push_back(std::sqrt(dp[pred.dims.index(v.x, v.y, v.z)]));
  return percentile(std::move(pooled), 95.0);
}

struct CalibrationBin {
  double lower = 0.0;
  double upper = 0.0;
  std::size_t count = 0;
  double accuracy = 0.0;
  double confidence = 0.0;
};

struct CalibrationReport {
  std::vector<CalibrationBin> bins;  // equal-width reliability bins
  double ece = 0.0;
  double ace = 0.0;
  double brier = 0.0;
  std::size_t n = 0;
};

namespace detail {

inline double weighted_gap(const std::vector<CalibrationBin>& bins, std::size_t n) {
  double e = 0.0;
  for (const auto& b : bins) {
    if (b.count == 0) continue;
    e += static_cast<double>(b.count) / static_cast<double>(n) * std::abs(b.accuracy - b.confidence);
  }
  return e;
}

inline void require_bins(std::size_t m) {
  if (m < 1) throw std::invalid_argument("bin count must be at least 1");
}

}  // namespace detail

/// Equal-width bins on [0,1]; confidence 1.0 falls in the last bin.
inline std::vector<CalibrationBin> reliability_bins(std::span<const double> conf, std::span<const std::uint8_t> correct,
                                                    std::size_t m) {
  detail::require_same_length(conf.size(), correct.size(), "reliability_bins");
  detail::require_bins(m);
  std::vector<CalibrationBin> bins(m);
  std::vector<double> acc(m, 0.0), cs(m, 0.0);
  for (std::size_t i = 0; i < conf.size(); ++i) {
    const auto b = std::min(static_cast<std::size_t>(conf[i] * static_cast<double>(m)), m - 1);
    ++bins[b].count;
    acc[b] += correct[i] ? 1.0 : 0.0;
    cs[b] += conf[i];
  }
  for (std::size_t b = 0; b < m; ++b) {
    bins[b].lower = static_cast<double>(b) / static_cast<double>(m);
    bins[b].upper = static_cast<double>(b + 1) / static_cast<double>(m);
    if (bins[b].count) {
      bins[b].accuracy = acc[b] / static_cast<double>(bins[b].count);
      bins[b].confidence = cs[b] / static_cast<double>(bins[b].count);
    }
  }
  return bins;
}

inline double ece(std::span<const double> conf, std::span<const std::uint8_t> correct, std::size_t m = kDefaultBins) {
  return detail::weighted_gap(reliability_bins(conf, correct, m), conf.size());
}

/// Equal-mass bins over confidence-sorted samples; the first n % m bins take
/// one extra sample. A cut that would split equal confidences moves to the
/// end of the tie run, so the binning depends only on the multiset of
/// (confidence, correct) pairs.
inline std::vector<CalibrationBin> adaptive_bins(std::span<const double> conf, std::span<const std::uint8_t> correct,
                                                 std::size_t m) {
  detail::require_same_length(conf.size(), correct.size(), "adaptive_bins");
  detail::require_bins(m);
  const std::size_t n = conf.size();
  std::vector<std::size_t> order(n);
  std::iota(order.begin(), order.end(), 0);
  std::sort(order.begin(), order.end(), [&](std::size_t a, std::size_t b) { return conf[a] < conf[b]; });
  std::vector<CalibrationBin> bins;
  std::size_t pos = 0, nominal = 0;
  for (std::size_t b = 0; b < m; ++b) {
    nominal += n / m + (b < n % m ? 1 : 0);
    std::size_t end = std::max(nominal, pos);
    while (end > pos && end < n && conf[order[end - 1]] == conf[order[end]]) ++end;
    if (end == pos) continue;
    CalibrationBin bin;
    bin.count = end - pos;
    double acc = 0.0, cs = 0.0;
    for (std::size_t j = pos; j < end; ++j) {
      acc += correct[order[j]] ? 1.0 : 0.0;
      cs += conf[order[j]];
    }
    bin.lower = conf[order[pos]];
    bin.upper = conf[order[end - 1]];
    bin.accuracy = acc / static_cast<double>(bin.count);
    bin.confidence = cs / static_cast<double>(bin.count);
    bins.push_back(bin);
    pos = end;
  }
  return bins;
}

inline double ace(std::span<const double> conf, std::span<const std::uint8_t> correct, std::size_t m = kDefaultBins) {
  return detail::weighted_gap(adaptive_bins(conf, correct, m), conf.size());
}

inline double weighted_gap(const std::vector<CalibrationBin>& bins, std::size_t n) {
  return detail::weighted_gap(bins, n);
}

namespace detail {

template <typename Label>
double brier_impl(std::span<const double> probs, std::span<const Label> labels) {
  require_same_length(probs.size(), labels.size(), "brier");
  if (probs.empty()) throw std::invalid_argument("brier of an empty stream");
  double s = 0.0;
  for (std::size_t i = 0; i < probs.size(); ++i) {
    const double d = probs[i] - static_cast<double>(labels[i]);
    s += d * d;
  }
  return s / static_cast<double>(probs.size());
}

}  // namespace detail

inline double brier(std::span<const double> probs, std::span<const std::uint8_t> labels) {
  return detail::brier_impl(probs, labels);
}

inline double brier(std::span<const double> probs, std::span<const double> labels) {
  return detail::brier_impl(probs, labels);
}

/// Voxel-level confidence max(p, 1-p) and correctness of the thresholded
/// prediction.
struct VoxelCalibration {
  std::vector<double> confidence;
  std::vector<std::uint8_t> correct;
};

inline VoxelCalibration voxel_calibration(std::span<const double> probs, std::span<const std::uint8_t> labels,
                                          double threshold = kMaskThreshold) {
  detail::require_same_length(probs.size(), labels.size(), "voxel_calibration");
  VoxelCalibration v;
  v.confidence.resize(probs.size());
  v.correct.resize(probs.size());
  for (std::size_t i = 0; i < probs.size(); ++i) {
    v.confidence[i] = std::max(probs[i], 1.0 - probs[i]);
    v.correct[i] = static_cast<std::uint8_t>((probs[i] >= threshold) == (labels[i] != 0));
  }
  return v;
}

inline CalibrationReport calibration_report(std::span<const double> probs, std::span<const std::uint8_t> labels,
                                            std::size_t m = kDefaultBins) {
  const auto vc = voxel_calibration(probs, labels);
  CalibrationReport r;
  r.n = probs.size();
  r.bins = reliability_bins(vc.confidence, vc.correct, m);
  r.ece = detail::weighted_gap(r.bins, r.n);
  r.ace = ace(vc.confidence, vc.correct, m);
  r.brier = brier(probs, labels);
  return r;
}

inline double dgg(double source, double target) { return source - target; }

/// Mean BCE of sigmoid(logit / T), computed from logits.
inline double scaled_nll(std::span<const double> logits, std::span<const std::uint8_t> labels, double t) {
  detail::require_same_length(logits.size(), labels.size(), "scaled_nll");
  double s = 0.0;
  for (std::size_t i = 0; i < logits.size(); ++i) {
    const double x = logits[i] / t;
    // -log sigmoid(x) = softplus(-x); -log(1 - sigmoid(x)) = softplus(x)
    const double signed_x = labels[i] ? -x : x;
    s += std::max(signed_x, 0.0) + std::log1p(std::exp(-std::abs(signed_x)));
  }
  return s / static_cast<double>(logits.size());
}

struct TemperatureFit {
  double temperature = 1.0;
  double nll_before = 0.0;  // at T = 1
  double nll_after = 0.0;
  double ece_before = 0.0;
  double ece_after = 0.0;
};

inline constexpr double kTemperatureLo = 0.05;
inline constexpr double kTemperatureHi = 20.0;
inline constexpr double kTemperatureTol = 1e-4;

inline std::vector<double> sigmoid_scaled(std::span<const double> logits, double t) {
  std::vector<double> p(logits.size());
  for (std::size_t i = 0; i < logits.size(); ++i) {
    const double x = logits[i] / t;
    if (x >= 0.0) {
      p[i] = 1.0 / (1.0 + std::exp(-x));
    } else {
      const double e = std::exp(x);
      p[i] = e / (1.0 + e);
    }
  }
  return p;
}

/// Golden-section search for the NLL-minimising temperature on [0.05, 20].
/// T = 1 is kept if the search lands on a worse value.
inline TemperatureFit temperature_scale(std::span<const double> logits, std::span<const std::uint8_t> labels,
                                        std::size_t m = kDefaultBins) {
  detail::require_same_length(logits.size(), labels.size(), "temperature_scale");
  if (logits.empty()) throw std::invalid_argument("temperature_scale: empty validation set");
  const bool any_pos = std::any_of(labels.begin(), labels.end(), [](auto v) { return v != 0; });
  const bool any_neg = std::any_of(labels.begin(), labels.end(), [](auto v) { return v == 0; });
  if (!any_pos || !any_neg) throw std::invalid_argument("temperature_scale: validation labels are all one class");

  const double phi = (std::sqrt(5.0) - 1.0) / 2.0;
  double a = kTemperatureLo, b = kTemperatureHi;
  double c = b - phi * (b - a), d = a + phi * (b - a);
  double fc = scaled_nll(logits, labels, c), fd = scaled_nll(logits, labels, d);
  while (b - a > kTemperatureTol) {
    if (fc < fd) {
      b = d;
      d = c;
      fd = fc;
      c = b - phi * (b - a);
      fc = scaled_nll(logits, labels, c);
    } else {
      a = c;
      c = d;
      fc = fd;
      d = a + phi * (b - a);
      fd = scaled_nll(logits, labels, d);
    }
  }
  TemperatureFit fit;
  fit.nll_before = scaled_nll(logits, labels, 1.0);
  fit.temperature = 0.5 * (a + b);
  fit.nll_after = scaled_nll(logits, labels, fit.temperature);
  if (fit.nll_after > fit.nll_before) {
    fit.temperature = 1.0;
    fit.nll_after = fit.nll_before;
  }
  auto ece_at = [&](double t) {
    const auto p = sigmoid_scaled(logits, t);
    const auto vc = voxel_calibration(p, labels);
    return ece(vc.confidence, vc.correct, m);
  };
  fit.ece_before = ece_at(1.0);
  fit.ece_after = ece_at(fit.temperature);
  return fit;
}

/// Per-sample evaluation row.
struct MetricsRow {
  std::string sample_id;
  DomainTag domain;
  double dsc = 0.0;
  std::optional<double> hd95;  // mm; nullopt when a mask is empty
  double ece = 0.0;
  double ace = 0.0;
  double brier = 0.0;
};

inline MetricsRow evaluate_sample(std::string id, const DomainTag& domain, std::span<const double> probs,
                                  const SegMask& truth, const Spacing& spacing, std::size_t m = kDefaultBins) {
  MetricsRow r;
  r.sample_id = std::move(id);
  r.domain = domain;
  const SegMask pred = threshold_mask(probs, truth.dims);
  r.dsc = dsc(pred, truth);
  r.hd95 = hd95(pred, truth, spacing);
  const auto rep = calibration_report(probs, truth.labels, m);
  r.ece = rep.ece;
  r.ace = rep.ace;
  r.brier = rep.brier;
  return r;
}

struct MeanStd {
  double mean = 0.0;
  double std = 0.0;  // sample standard deviation; 0 for fewer than 2 values
  std::size_t count = 0;
};

inline MeanStd mean_std(std::span<const double> v) {
  MeanStd m;
  m.count = v.size();
  if (v.empty()) return m;
  m.mean = std::accumulate(v.begin(), v.end(), 0.0) / static_cast<double>(v.size());
  if (v.size() > 1) {
    double s = 0.0;
    for (double x : v) s += (x - m.mean) * (x - m.mean);
    m.std = std::sqrt(s / static_cast<double>(v.size() - 1));
  }
  return m;
}

struct SplitSummary {
  MeanStd dsc, hd95, ece, ace, brier;
  std::size_t hd95_undefined = 0;
  std::size_t samples = 0;
};

inline SplitSummary summarize(std::span<const MetricsRow> rows) {
  std::vector<double> d, h, e, a, b;
  SplitSummary s;
  s.samples = rows.size();
  for (const auto& r : rows) {
    d.push_back(r.dsc);
    e.push_back(r.ece);
    a.push_back(r.ace);
    b.push_back(r.brier);
    if (r.hd95) {
      h.push_back(*r.hd95);
    } else {
      ++s.hd95_undefined;
    }
  }
  s.dsc = mean_std(d);
  s.hd95 = mean_std(h);
  s.ece = mean_std(e);
  s.ace = mean_std(a);
  s.brier = mean_std(b);
  return s;
}

}  // namespace calsam
