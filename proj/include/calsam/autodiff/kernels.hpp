#pragma once

// Raw numeric kernels behind the differentiable ops. Everything here works
// on contiguous buffers and knows nothing about graphs.

#include <algorithm>
#include <array>
#include <cmath>
#include <cstddef>
#include <cstdint>
#include <span>
#include <stdexcept>
#include <vector>

#include "calsam/autodiff/tensor.hpp"

namespace calsam::ad::kernels {

using Dims3 = std::array<std::size_t, 3>;

/// Geometry of a cubic-kernel 3D convolution, NCDHW layout.
struct ConvGeometry {
  std::size_t kernel = 3;
  std::size_t stride = 1;
  std::size_t padding = 0;
  Dims3 in_spatial{};   // spatial extents of the convolution input
  Dims3 out_spatial{};  // spatial extents of the convolution output
};

inline std::size_t conv_out_extent(std::size_t in, std::size_t k, std::size_t s, std::size_t p) {
  if (in + 2 * p < k) {
    throw std::invalid_argument("convolution kernel " + std::to_string(k) +
                                " larger than padded input extent " + std::to_string(in + 2 * p));
  }
  return (in + 2 * p - k) / s + 1;
}

inline ConvGeometry make_geometry(const Dims3& in, std::size_t k, std::size_t s, std::size_t p) {
  if (s == 0) throw std::invalid_argument("convolution stride must be >= 1");
  ConvGeometry g{k, s, p, in, {}};
  for (int a = 0; a < 3; ++a) g.out_spatial[a] = conv_out_extent(in[a], k, s, p);
  return g;
}

namespace detail {

// Output indices o in [first, last) for which o*s + tap - pad lies in [0, in).
struct Range {
  std::size_t first;
  std::size_t last;
};

inline Range valid_range(std::size_t out, std::size_t in, std::size_t s, std::size_t p,
                         std::size_t tap) {
  const auto off = static_cast<std::int64_t>(tap) - static_cast<std::int64_t>(p);
  const auto ss = static_cast<std::int64_t>(s);
  std::int64_t lo = 0;
  if (off < 0) lo = (-off + ss - 1) / ss;
  const std::int64_t hi_pos = static_cast<std::int64_t>(in) - 1 - off;
  if (hi_pos < 0) return {0, 0};
  std::int64_t hi = hi_pos / ss + 1;
  hi = std::min<std::int64_t>(hi, static_cast<std::int64_t>(out));
  if (lo >= hi) return {0, 0};
  return {static_cast<std::size_t>(lo), static_cast<std::size_t>(hi)};
}

inline std::size_t volume(const Dims3& d) { return d[0] * d[1] * d[2]; }

// Visits every (input row, output row, weight) triple of a convolution. The
// visitor receives the first valid input index, the first valid output index,
// the weight index and the number of valid outputs along the fastest axis;
// consecutive outputs step the input by `stride`.
template <class Visitor>
void for_each_row(std::size_t batch, std::size_t in_ch, std::size_t out_ch, const ConvGeometry& g,
                  Visitor&& visit) {
  const auto& in = g.in_spatial;
  const auto& out = g.out_spatial;
  const std::size_t k = g.kernel, s = g.stride, p = g.padding;
  const std::size_t in_vol = volume(in), out_vol = volume(out), k3 = k * k * k;
  for (std::size_t n = 0; n < batch; ++n) {
    for (std::size_t o = 0; o < out_ch; ++o) {
      const std::size_t y_base = (n * out_ch + o) * out_vol;
      for (std::size_t c = 0; c < in_ch; ++c) {
        const std::size_t x_base = (n * in_ch + c) * in_vol;
        const std::size_t w_base = (o * in_ch + c) * k3;
        for (std::size_t a = 0; a < k; ++a) {
          const Range ri = valid_range(out[0], in[0], s, p, a);
          for (std::size_t i = ri.first; i < ri.last; ++i) {
            const std::size_t xi = i * s + a - p;
            for (std::size_t b = 0; b < k; ++b) {
              const Range rj = valid_range(out[1], in[1], s, p, b);
              for (std::size_t j = rj.first; j < rj.last; ++j) {
                const std::size_t xj = j * s + b - p;
                const std::size_t x_row = x_base + (xi * in[1] + xj) * in[2];
                const std::size_t y_row = y_base + (i * out[1] + j) * out[2];
                for (std::size_t d = 0; d < k; ++d) {
                  const Range rl = valid_range(out[2], in[2], s, p, d);
                  if (rl.first >= rl.last) continue;
                  visit(x_row + rl.first * s + d - p, y_row + rl.first,
                        w_base + (a * k + b) * k + d, rl.last - rl.first);
                }
              }
            }
          }
        }
      }
    }
  }
}

}  // namespace detail

/// y[n,o,.] = sum_c w[o,c,.] * x[n,c,.]  (cross-correlation, zero padding)
inline void conv3d(std::span<const double> x, std::span<const double> w, std::span<double> y,
                   std::size_t batch, std::size_t in_ch, std::size_t out_ch,
                   const ConvGeometry& g) {
  std::fill(y.begin(), y.end(), 0.0);
  const std::size_t s = g.stride;
  detail::for_each_row(batch, in_ch, out_ch, g,
                       [&](std::size_t xi, std::size_t yi, std::size_t wi, std::size_t count) {
                         const double wv = w[wi];
                         const double* xs = x.data() + xi;
                         double* ys = y.data() + yi;
                         if (s == 1) {
                           for (std::size_t l = 0; l < count; ++l) ys[l] += wv * xs[l];
                         } else {
                           for (std::size_t l = 0; l < count; ++l) ys[l] += wv * xs[l * s];
                         }
                       });
}

/// Adjoint of conv3d with respect to its input.
inline void conv3d_input_grad(std::span<const double> gy, std::span<const double> w,
                              std::span<double> gx, std::size_t batch, std::size_t in_ch,
                              std::size_t out_ch, const ConvGeometry& g) {
  std::fill(gx.begin(), gx.end(), 0.0);
  const std::size_t s = g.stride;
  detail::for_each_row(batch, in_ch, out_ch, g,
                       [&](std::size_t xi, std::size_t yi, std::size_t wi, std::size_t count) {
                         const double wv = w[wi];
                         double* xs = gx.data() + xi;
                         const double* ys = gy.data() + yi;
                         if (s == 1) {
                           for (std::size_t l = 0; l < count; ++l) xs[l] += wv * ys[l];
                         } else {
                           for (std::size_t l = 0; l < count; ++l) xs[l * s] += wv * ys[l];
                         }
                       });
}

/// Adjoint of conv3d with respect to its weights.
inline void conv3d_weight_grad(std::span<const double> x, std::span<const double> gy,
                               std::span<double> gw, std::size_t batch, std::size_t in_ch,
                               std::size_t out_ch, const ConvGeometry& g) {
  std::fill(gw.begin(), gw.end(), 0.0);
  const std::size_t s = g.stride;
  detail::for_each_row(batch, in_ch, out_ch, g,
                       [&](std::size_t xi, std::size_t yi, std::size_t wi, std::size_t count) {
                         const double* xs = x.data() + xi;
                         const double* ys = gy.data() + yi;
                         double acc = 0.0;
                         if (s == 1) {
                           for (std::size_t l = 0; l < count; ++l) acc += ys[l] * xs[l];
                         } else {
                           for (std::size_t l = 0; l < count; ++l) acc += ys[l] * xs[l * s];
                         }
                         gw[wi] += acc;
                       });
}

/// Two-tap linear resampling table along one axis.
struct Resample1D {
  std::size_t in_len = 0;
  std::size_t out_len = 0;
  std::vector<std::size_t> lo, hi;
  std::vector<double> w_lo, w_hi;
};

enum class UpsampleMode { nearest, linear };

inline Resample1D make_upsample(std::size_t in_len, std::size_t factor, UpsampleMode mode) {
  if (factor == 0 || in_len == 0) throw std::invalid_argument("upsample needs factor and extent >= 1");
  Resample1D r;
  r.in_len = in_len;
  r.out_len = in_len * factor;
  r.lo.resize(r.out_len);
  r.hi.resize(r.out_len);
  r.w_lo.resize(r.out_len);
  r.w_hi.resize(r.out_len);
  for (std::size_t o = 0; o < r.out_len; ++o) {
    if (mode == UpsampleMode::nearest) {
      r.lo[o] = r.hi[o] = o / factor;
      r.w_lo[o] = 1.0;
      r.w_hi[o] = 0.0;
      continue;
    }
    // half-pixel centres, edge-clamped (align_corners = false)
    double src = (static_cast<double>(o) + 0.5) / static_cast<double>(factor) - 0.5;
    src = std::clamp(src, 0.0, static_cast<double>(in_len - 1));
    const auto i0 = static_cast<std::size_t>(std::floor(src));
    const std::size_t i1 = std::min(i0 + 1, in_len - 1);
    const double t = src - static_cast<double>(i0);
    r.lo[o] = i0;
    r.hi[o] = i1;
    r.w_lo[o] = 1.0 - t;
    r.w_hi[o] = t;
  }
  return r;
}

// Shape viewed as [outer, axis, inner].
inline std::array<std::size_t, 3> split_axis(const Shape& shape, std::size_t axis) {
  std::size_t outer = 1, inner = 1;
  for (std::size_t i = 0; i < axis; ++i) outer *= shape[i];
  for (std::size_t i = axis + 1; i < shape.size(); ++i) inner *= shape[i];
  return {outer, shape[axis], inner};
}

inline void resample_forward(std::span<const double> x, std::span<double> y, const Shape& in_shape,
                             std::size_t axis, const Resample1D& r) {
  const auto [outer, len, inner] = split_axis(in_shape, axis);
  for (std::size_t a = 0; a < outer; ++a) {
    const double* xs = x.data() + a * len * inner;
    double* ys = y.data() + a * r.out_len * inner;
    for (std::size_t o = 0; o < r.out_len; ++o) {
      const double* x0 = xs + r.lo[o] * inner;
      const double* x1 = xs + r.hi[o] * inner;
      const double w0 = r.w_lo[o], w1 = r.w_hi[o];
      double* yo = ys + o * inner;
      for (std::size_t b = 0; b < inner; ++b) yo[b] = w0 * x0[b] + w1 * x1[b];
    }
  }
}

inline void resample_adjoint(std::span<const double> gy, std::span<double> gx,
                             const Shape& in_shape, std::size_t axis, const Resample1D& r) {
  std::fill(gx.begin(), gx.end(), 0.0);
  const auto [outer, len, inner] = split_axis(in_shape, axis);
  for (std::size_t a = 0; a < outer; ++a) {
    double* xs = gx.data() + a * len * inner;
    const double* ys = gy.data() + a * r.out_len * inner;
    for (std::size_t o = 0; o < r.out_len; ++o) {
      double* x0 = xs + r.lo[o] * inner;
      double* x1 = xs + r.hi[o] * inner;
      const double w0 = r.w_lo[o], w1 = r.w_hi[o];
      const double* yo = ys + o * inner;
      for (std::size_t b = 0; b < inner; ++b) {
        x0[b] += w0 * yo[b];
        x1[b] += w1 * yo[b];
      }
    }
  }
}

/// Numpy-style broadcast of `from` into `to` (trailing alignment). Returns
/// the source stride of every target axis, zero where the axis is broadcast.
inline std::vector<std::size_t> broadcast_strides(const Shape& from, const Shape& to) {
  if (from.size() > to.size()) {
    throw std::invalid_argument("cannot broadcast " + to_string(from) + " to " + to_string(to));
  }
  std::vector<std::size_t> strides(to.size(), 0);
  std::size_t stride = 1;
  for (std::size_t k = 0; k < from.size(); ++k) {
    const std::size_t fi = from.size() - 1 - k;
    const std::size_t ti = to.size() - 1 - k;
    if (from[fi] == to[ti]) {
      strides[ti] = stride;
    } else if (from[fi] != 1) {
      throw std::invalid_argument("cannot broadcast " + to_string(from) + " to " + to_string(to));
    }
    stride *= from[fi];
  }
  return strides;
}

// Calls fn(target_index, source_index) for every element of `to`.
template <class Fn>
void for_each_broadcast(const Shape& from, const Shape& to, Fn&& fn) {
  const auto strides = broadcast_strides(from, to);
  const std::size_t n = element_count(to);
  const std::size_t r = to.size();
  std::vector<std::size_t> idx(r, 0);
  std::size_t src = 0;
  for (std::size_t t = 0; t < n; ++t) {
    fn(t, src);
    for (std::size_t ax = r; ax-- > 0;) {
      if (++idx[ax] < to[ax]) {
        src += strides[ax];
        break;
      }
      src -= strides[ax] * (to[ax] - 1);
      idx[ax] = 0;
    }
  }
}

}  // namespace calsam::ad::kernels
