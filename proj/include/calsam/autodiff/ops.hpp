#pragma once

#include <algorithm>
#include <cmath>
#include <initializer_list>
#include <stdexcept>
#include <string>
#include <string_view>
#include <vector>

#include "calsam/autodiff/graph.hpp"

namespace calsam::ad {

namespace detail {

struct Recorder {
  static Graph* common_graph(std::initializer_list<const Tensor*> inputs) {
    Graph* g = nullptr;
    for (const Tensor* t : inputs) {
      if (t == nullptr || t->graph_ == nullptr) continue;
      if (g != nullptr && g != t->graph_) {
        throw std::invalid_argument("operands belong to different graphs");
      }
      g = t->graph_;
    }
    return g;
  }

  static Tensor make(Op op, const Tensor* a, const Tensor* b, Shape shape,
                     std::vector<double> values, OpAttrs attrs = {},
                     std::vector<Tensor> saved = {}, bool save_output = false) {
    Graph* g = common_graph({a, b});
    if (g == nullptr || !g->recording()) return Tensor(std::move(shape), std::move(values));
    Node n;
    n.op = op;
    n.inputs = {a && a->graph_ ? a->node_ : kNoNode, b && b->graph_ ? b->node_ : kNoNode};
    n.saved = std::move(saved);
    n.attrs = std::move(attrs);
    n.shape = std::move(shape);
    Tensor t = g->push(std::move(n), std::move(values));
    if (save_output) g->nodes_.back().saved.push_back(t);
    return t;
  }
};

inline void require_same_shape(const Tensor& a, const Tensor& b, std::string_view op) {
  if (a.shape() != b.shape()) {
    throw std::invalid_argument(std::string(op) + ": shape mismatch " + to_string(a.shape()) +
                                " vs " + to_string(b.shape()));
  }
}

template <class F>
std::vector<double> map(const Tensor& a, F f) {
  std::vector<double> out(a.size());
  const auto av = a.values();
  for (std::size_t i = 0; i < out.size(); ++i) out[i] = f(av[i]);
  return out;
}

template <class F>
std::vector<double> zip(const Tensor& a, const Tensor& b, std::string_view op, F f) {
  require_same_shape(a, b, op);
  std::vector<double> out(a.size());
  const auto av = a.values();
  const auto bv = b.values();
  for (std::size_t i = 0; i < out.size(); ++i) out[i] = f(av[i], bv[i]);
  return out;
}

}  // namespace detail

using detail::Recorder;

inline Tensor add(const Tensor& a, const Tensor& b) {
  return Recorder::make(Op::add, &a, &b, a.shape(),
                        detail::zip(a, b, "add", [](double x, double y) { return x + y; }));
}

inline Tensor sub(const Tensor& a, const Tensor& b) {
  return Recorder::make(Op::sub, &a, &b, a.shape(),
                        detail::zip(a, b, "sub", [](double x, double y) { return x - y; }));
}

inline Tensor mul(const Tensor& a, const Tensor& b) {
  return Recorder::make(Op::mul, &a, &b, a.shape(),
                        detail::zip(a, b, "mul", [](double x, double y) { return x * y; }), {},
                        {a, b});
}

inline Tensor div(const Tensor& a, const Tensor& b) {
  return Recorder::make(Op::div, &a, &b, a.shape(),
                        detail::zip(a, b, "div", [](double x, double y) { return x / y; }), {},
                        {a, b});
}

inline Tensor scale(const Tensor& a, double c) {
  OpAttrs at;
  at.scalar = c;
  return Recorder::make(Op::scale, &a, nullptr, a.shape(),
                        detail::map(a, [c](double x) { return c * x; }), at);
}

inline Tensor add_scalar(const Tensor& a, double c) {
  OpAttrs at;
  at.scalar = c;
  return Recorder::make(Op::add_scalar, &a, nullptr, a.shape(),
                        detail::map(a, [c](double x) { return x + c; }), at);
}

inline Tensor neg(const Tensor& a) { return scale(a, -1.0); }

/// 1 - a
inline Tensor one_minus(const Tensor& a) { return add_scalar(scale(a, -1.0), 1.0); }

inline Tensor matmul(const Tensor& a, const Tensor& b) {
  if (a.rank() != 2 || b.rank() != 2 || a.shape()[1] != b.shape()[0]) {
    throw std::invalid_argument("matmul: shape mismatch " + to_string(a.shape()) + " x " +
                                to_string(b.shape()));
  }
  const std::size_t m = a.shape()[0], k = a.shape()[1], n = b.shape()[1];
  std::vector<double> out(m * n, 0.0);
  const auto av = a.values();
  const auto bv = b.values();
  for (std::size_t i = 0; i < m; ++i)
    for (std::size_t p = 0; p < k; ++p) {
      const double x = av[i * k + p];
      for (std::size_t j = 0; j < n; ++j) out[i * n + j] += x * bv[p * n + j];
    }
  return Recorder::make(Op::matmul, &a, &b, {m, n}, std::move(out), {}, {a, b});
}

inline Tensor transpose(const Tensor& a) {
  if (a.rank() != 2) throw std::invalid_argument("transpose: needs rank 2, got " + to_string(a.shape()));
  const std::size_t m = a.shape()[0], n = a.shape()[1];
  std::vector<double> out(m * n);
  const auto av = a.values();
  for (std::size_t i = 0; i < m; ++i)
    for (std::size_t j = 0; j < n; ++j) out[j * m + i] = av[i * n + j];
  return Recorder::make(Op::transpose, &a, nullptr, {n, m}, std::move(out));
}

namespace detail {

inline kernels::Dims3 spatial(const Shape& s) { return {s[2], s[3], s[4]}; }

inline void require_conv_weight(const Tensor& w, std::string_view op) {
  if (w.rank() != 5 || w.shape()[2] != w.shape()[3] || w.shape()[3] != w.shape()[4]) {
    throw std::invalid_argument(std::string(op) + ": weight must be [out,in,k,k,k], got " +
                                to_string(w.shape()));
  }
}

}  // namespace detail

inline Tensor conv3d_with_geometry(const Tensor& x, const Tensor& w,
                                   const kernels::ConvGeometry& geom) {
  const std::size_t n = x.shape()[0], c = x.shape()[1], o = w.shape()[0];
  const auto& os = geom.out_spatial;
  Shape out_shape{n, o, os[0], os[1], os[2]};
  std::vector<double> out(element_count(out_shape));
  kernels::conv3d(x.values(), w.values(), out, n, c, o, geom);
  OpAttrs at;
  at.conv = geom;
  return Recorder::make(Op::conv3d, &x, &w, std::move(out_shape), std::move(out), at, {x, w});
}

/// 3D cross-correlation, x: [N,C,D,H,W], w: [O,C,k,k,k].
inline Tensor conv3d(const Tensor& x, const Tensor& w, std::size_t stride = 1,
                     std::size_t padding = 0) {
  detail::require_conv_weight(w, "conv3d");
  if (x.rank() != 5 || x.shape()[1] != w.shape()[1]) {
    throw std::invalid_argument("conv3d: input " + to_string(x.shape()) +
                                " incompatible with weight " + to_string(w.shape()));
  }
  const auto geom =
      kernels::make_geometry(detail::spatial(x.shape()), w.shape()[2], stride, padding);
  return conv3d_with_geometry(x, w, geom);
}

/// Gradient of conv3d with respect to its input, as a differentiable op.
inline Tensor conv3d_input_grad(const Tensor& gy, const Tensor& w,
                                const kernels::ConvGeometry& geom) {
  const std::size_t n = gy.shape()[0], o = w.shape()[0], c = w.shape()[1];
  const auto& is = geom.in_spatial;
  Shape out_shape{n, c, is[0], is[1], is[2]};
  std::vector<double> out(element_count(out_shape));
  kernels::conv3d_input_grad(gy.values(), w.values(), out, n, c, o, geom);
  OpAttrs at;
  at.conv = geom;
  return Recorder::make(Op::conv3d_input_grad, &gy, &w, std::move(out_shape), std::move(out), at,
                        {gy, w});
}

/// Gradient of conv3d with respect to its weight, as a differentiable op.
inline Tensor conv3d_weight_grad(const Tensor& x, const Tensor& gy,
                                 const kernels::ConvGeometry& geom) {
  const std::size_t n = x.shape()[0], c = x.shape()[1], o = gy.shape()[1];
  const std::size_t k = geom.kernel;
  Shape out_shape{o, c, k, k, k};
  std::vector<double> out(element_count(out_shape));
  kernels::conv3d_weight_grad(x.values(), gy.values(), out, n, c, o, geom);
  OpAttrs at;
  at.conv = geom;
  return Recorder::make(Op::conv3d_weight_grad, &x, &gy, std::move(out_shape), std::move(out), at,
                        {x, gy});
}

inline Tensor relu(const Tensor& a) {
  Tensor mask(a.shape(), detail::map(a, [](double x) { return x > 0.0 ? 1.0 : 0.0; }));
  return Recorder::make(Op::relu, &a, nullptr, a.shape(),
                        detail::map(a, [](double x) { return x > 0.0 ? x : 0.0; }), {}, {mask});
}

inline double sigmoid_value(double x) {
  if (x >= 0.0) return 1.0 / (1.0 + std::exp(-x));
  const double e = std::exp(x);
  return e / (1.0 + e);
}

inline Tensor sigmoid(const Tensor& a) {
  return Recorder::make(Op::sigmoid, &a, nullptr, a.shape(), detail::map(a, sigmoid_value), {},
                        {}, true);
}

inline Tensor log(const Tensor& a) {
  return Recorder::make(Op::log, &a, nullptr, a.shape(),
                        detail::map(a, [](double x) { return std::log(x); }), {}, {a});
}

inline Tensor exp(const Tensor& a) {
  return Recorder::make(Op::exp, &a, nullptr, a.shape(),
                        detail::map(a, [](double x) { return std::exp(x); }), {}, {}, true);
}

/// Elementwise a^c for a constant exponent.
inline Tensor pow(const Tensor& a, double c) {
  OpAttrs at;
  at.scalar = c;
  return Recorder::make(Op::pow, &a, nullptr, a.shape(),
                        detail::map(a, [c](double x) { return std::pow(x, c); }), at, {a});
}

inline Tensor clamp(const Tensor& a, double lo, double hi) {
  Tensor mask(a.shape(), detail::map(a, [=](double x) { return (x >= lo && x <= hi) ? 1.0 : 0.0; }));
  OpAttrs at;
  at.lo = lo;
  at.hi = hi;
  return Recorder::make(Op::clamp, &a, nullptr, a.shape(),
                        detail::map(a, [=](double x) { return std::clamp(x, lo, hi); }), at,
                        {mask});
}

inline Tensor sum(const Tensor& a) {
  double s = 0.0;
  for (double v : a.values()) s += v;
  OpAttrs at;
  at.shape = a.shape();
  return Recorder::make(Op::sum, &a, nullptr, {}, {s}, at);
}

inline Tensor mean(const Tensor& a) {
  double s = 0.0;
  for (double v : a.values()) s += v;
  OpAttrs at;
  at.shape = a.shape();
  return Recorder::make(Op::mean, &a, nullptr, {}, {s / static_cast<double>(a.size())}, at);
}

/// Squared L2 norm over all elements.
inline Tensor sum_squares(const Tensor& a) {
  double s = 0.0;
  for (double v : a.values()) s += v * v;
  return Recorder::make(Op::sum_squares, &a, nullptr, {}, {s}, {}, {a});
}

inline Tensor broadcast_to(const Tensor& a, const Shape& shape) {
  if (a.shape() == shape) return a;
  std::vector<double> out(element_count(shape));
  const auto av = a.values();
  kernels::for_each_broadcast(a.shape(), shape,
                              [&](std::size_t t, std::size_t s) { out[t] = av[s]; });
  OpAttrs at;
  at.shape = a.shape();
  return Recorder::make(Op::broadcast_to, &a, nullptr, shape, std::move(out), at);
}

/// Reduces `a` onto a shape it was broadcast from.
inline Tensor sum_to(const Tensor& a, const Shape& shape) {
  if (a.shape() == shape) return a;
  std::vector<double> out(element_count(shape), 0.0);
  const auto av = a.values();
  kernels::for_each_broadcast(shape, a.shape(),
                              [&](std::size_t t, std::size_t s) { out[s] += av[t]; });
  OpAttrs at;
  at.shape = a.shape();
  return Recorder::make(Op::sum_to, &a, nullptr, shape, std::move(out), at);
}

inline Tensor reshape(const Tensor& a, const Shape& shape) {
  if (element_count(shape) != a.size()) {
    throw std::invalid_argument("reshape: cannot view " + to_string(a.shape()) + " as " +
                                to_string(shape));
  }
  OpAttrs at;
  at.shape = a.shape();
  return Recorder::make(Op::reshape, &a, nullptr, shape, a.to_vector(), at);
}

inline Tensor slice(const Tensor& a, std::size_t axis, std::size_t start, std::size_t length) {
  if (axis >= a.rank() || start + length > a.shape()[axis]) {
    throw std::invalid_argument("slice: [" + std::to_string(start) + ", " +
                                std::to_string(start + length) + ") on axis " +
                                std::to_string(axis) + " out of range for " + to_string(a.shape()));
  }
  const auto [outer, len, inner] = kernels::split_axis(a.shape(), axis);
  Shape out_shape = a.shape();
  out_shape[axis] = length;
  std::vector<double> out(outer * length * inner);
  const auto av = a.values();
  for (std::size_t o = 0; o < outer; ++o)
    std::copy_n(av.data() + (o * len + start) * inner, length * inner,
                out.data() + o * length * inner);
  OpAttrs at;
  at.axis = axis;
  at.start = start;
  at.length = length;
  at.shape = a.shape();
  return Recorder::make(Op::slice, &a, nullptr, std::move(out_shape), std::move(out), at);
}

/// Embeds `g` into zeros of `full_shape` at `start` along `axis` (adjoint of slice).
inline Tensor slice_grad(const Tensor& g, const Shape& full_shape, std::size_t axis,
                         std::size_t start) {
  const std::size_t length = g.shape()[axis];
  const auto [outer, len, inner] = kernels::split_axis(full_shape, axis);
  std::vector<double> out(element_count(full_shape), 0.0);
  const auto gv = g.values();
  for (std::size_t o = 0; o < outer; ++o)
    std::copy_n(gv.data() + o * length * inner, length * inner,
                out.data() + (o * len + start) * inner);
  OpAttrs at;
  at.axis = axis;
  at.start = start;
  at.length = length;
  return Recorder::make(Op::slice_grad, &g, nullptr, full_shape, std::move(out), at);
}

inline Tensor resample(const Tensor& a, std::size_t axis,
                       std::shared_ptr<const kernels::Resample1D> table) {
  if (axis >= a.rank() || a.shape()[axis] != table->in_len) {
    throw std::invalid_argument("resample: axis " + std::to_string(axis) + " of " +
                                to_string(a.shape()) + " does not match table length " +
                                std::to_string(table->in_len));
  }
  Shape out_shape = a.shape();
  out_shape[axis] = table->out_len;
  std::vector<double> out(element_count(out_shape));
  kernels::resample_forward(a.values(), out, a.shape(), axis, *table);
  OpAttrs at;
  at.axis = axis;
  at.resample = std::move(table);
  return Recorder::make(Op::resample, &a, nullptr, std::move(out_shape), std::move(out), at);
}

inline Tensor resample_adjoint(const Tensor& g, std::size_t axis,
                               std::shared_ptr<const kernels::Resample1D> table) {
  Shape in_shape = g.shape();
  in_shape[axis] = table->in_len;
  std::vector<double> out(element_count(in_shape));
  kernels::resample_adjoint(g.values(), out, in_shape, axis, *table);
  OpAttrs at;
  at.axis = axis;
  at.resample = std::move(table);
  return Recorder::make(Op::resample_adjoint, &g, nullptr, std::move(in_shape), std::move(out),
                        at);
}

/// Separable upsampling of the three spatial axes of an NCDHW tensor.
inline Tensor upsample3d(const Tensor& a, std::size_t factor, kernels::UpsampleMode mode) {
  if (a.rank() != 5) throw std::invalid_argument("upsample3d: needs NCDHW, got " + to_string(a.shape()));
  Tensor out = a;
  for (std::size_t axis = 2; axis < 5; ++axis) {
    auto table = std::make_shared<const kernels::Resample1D>(
        kernels::make_upsample(out.shape()[axis], factor, mode));
    out = resample(out, axis, std::move(table));
  }
  return out;
}

inline Tensor operator+(const Tensor& a, const Tensor& b) { return add(a, b); }
inline Tensor operator-(const Tensor& a, const Tensor& b) { return sub(a, b); }
inline Tensor operator*(const Tensor& a, const Tensor& b) { return mul(a, b); }
inline Tensor operator/(const Tensor& a, const Tensor& b) { return div(a, b); }
inline Tensor operator*(double c, const Tensor& a) { return scale(a, c); }
inline Tensor operator*(const Tensor& a, double c) { return scale(a, c); }
inline Tensor operator+(const Tensor& a, double c) { return add_scalar(a, c); }
inline Tensor operator-(const Tensor& a) { return neg(a); }

namespace detail {

// Input gradients of one node given the gradient of its output. Uses the
// public ops, so the computation is recorded when the graph is recording.
inline std::array<Tensor, 2> backward_node(const Node& n, const Tensor& g,
                                           std::array<bool, 2> need) {
  const auto& s = n.saved;
  const auto& at = n.attrs;
  std::array<Tensor, 2> r;
  switch (n.op) {
    case Op::leaf:
      break;
    case Op::add:
      r = {g, g};
      break;
    case Op::sub:
      r[0] = g;
      if (need[1]) r[1] = neg(g);
      break;
    case Op::mul:
      if (need[0]) r[0] = mul(g, s[1]);
      if (need[1]) r[1] = mul(g, s[0]);
      break;
    case Op::div:
      if (need[0]) r[0] = div(g, s[1]);
      if (need[1]) r[1] = neg(mul(g, div(s[0], mul(s[1], s[1]))));
      break;
    case Op::scale:
      r[0] = scale(g, at.scalar);
      break;
    case Op::add_scalar:
      r[0] = g;
      break;
    case Op::matmul:
      if (need[0]) r[0] = matmul(g, transpose(s[1]));
      if (need[1]) r[1] = matmul(transpose(s[0]), g);
      break;
    case Op::transpose:
      r[0] = transpose(g);
      break;
    case Op::conv3d:
      if (need[0]) r[0] = conv3d_input_grad(g, s[1], at.conv);
      if (need[1]) r[1] = conv3d_weight_grad(s[0], g, at.conv);
      break;
    case Op::conv3d_input_grad:  // inputs (gy, w)
      if (need[0]) r[0] = conv3d_with_geometry(g, s[1], at.conv);
      if (need[1]) r[1] = conv3d_weight_grad(g, s[0], at.conv);
      break;
    case Op::conv3d_weight_grad:  // inputs (x, gy)
      if (need[0]) r[0] = conv3d_input_grad(s[1], g, at.conv);
      if (need[1]) r[1] = conv3d_with_geometry(s[0], g, at.conv);
      break;
    case Op::relu:
    case Op::clamp:
      r[0] = mul(g, s[0]);
      break;
    case Op::sigmoid:
      r[0] = mul(g, mul(s[0], one_minus(s[0])));
      break;
    case Op::log:
      r[0] = div(g, s[0]);
      break;
    case Op::exp:
      r[0] = mul(g, s[0]);
      break;
    case Op::pow:
      if (at.scalar == 0.0) {
        r[0] = Tensor::zeros(s[0].shape());
      } else {
        r[0] = mul(g, scale(pow(s[0], at.scalar - 1.0), at.scalar));
      }
      break;
    case Op::sum:
      r[0] = broadcast_to(g, at.shape);
      break;
    case Op::mean:
      r[0] = broadcast_to(scale(g, 1.0 / static_cast<double>(element_count(at.shape))), at.shape);
      break;
    case Op::sum_squares:
      r[0] = mul(broadcast_to(g, s[0].shape()), scale(s[0], 2.0));
      break;
    case Op::broadcast_to:
      r[0] = sum_to(g, at.shape);
      break;
    case Op::sum_to:
      r[0] = broadcast_to(g, at.shape);
      break;
    case Op::reshape:
      r[0] = reshape(g, at.shape);
      break;
    case Op::slice:
      r[0] = slice_grad(g, at.shape, at.axis, at.start);
      break;
    case Op::slice_grad:
      r[0] = slice(g, at.axis, at.start, at.length);
      break;
    case Op::resample:
      r[0] = resample_adjoint(g, at.axis, at.resample);
      break;
    case Op::resample_adjoint:
      r[0] = resample(g, at.axis, at.resample);
      break;
  }
  return r;
}

}  // namespace detail

inline std::vector<Tensor> Graph::gradient(const Tensor& root, const std::vector<Tensor>& wrt,
                                           bool create_graph) {
  if (root.size() != 1) {
    throw std::invalid_argument("backward root must be a scalar, got shape " +
                                to_string(root.shape()));
  }
  std::vector<Tensor> out(wrt.size());
  for (std::size_t i = 0; i < wrt.size(); ++i) out[i] = Tensor::zeros(wrt[i].shape());
  if (root.graph() != this) return out;

  const std::size_t r = root.node();
  std::vector<char> needed(r + 1, 0), target(r + 1, 0);
  std::size_t lowest = r + 1;
  for (const auto& w : wrt) {
    if (w.graph() != this || w.node() > r) continue;
    needed[w.node()] = target[w.node()] = 1;
    lowest = std::min(lowest, w.node());
  }
  if (lowest > r) return out;
  for (std::size_t id = lowest; id <= r; ++id) {
    for (std::size_t in : nodes_[id].inputs)
      if (in != kNoNode && in >= lowest && needed[in]) needed[id] = 1;
  }
  if (!needed[r]) return out;

  PauseScope scope(*this, create_graph);
  std::vector<Tensor> grads(r + 1);
  grads[r] = Tensor::ones(root.shape());
  for (std::size_t id = r + 1; id-- > lowest;) {
    if (!needed[id] || !grads[id].defined()) continue;
    if (nodes_[id].op == Op::leaf) continue;
    // Copy: recording may grow nodes_ and invalidate references.
    const Node node = nodes_[id];
    std::array<bool, 2> need{};
    for (int k = 0; k < 2; ++k) {
      const std::size_t in = node.inputs[k];
      need[k] = in != kNoNode && in >= lowest && needed[in];
    }
    auto in_grads = detail::backward_node(node, grads[id], need);
    if (!target[id]) grads[id] = Tensor();
    for (int k = 0; k < 2; ++k) {
      if (!need[k]) continue;
      Tensor& acc = grads[node.inputs[k]];
      acc = acc.defined() ? add(acc, in_grads[k]) : in_grads[k];
    }
  }
  for (std::size_t i = 0; i < wrt.size(); ++i) {
    const auto& w = wrt[i];
    if (w.graph() == this && w.node() <= r && grads[w.node()].defined()) out[i] = grads[w.node()];
  }
  return out;
}

/// Gradients of scalar `root` with respect to `wrt`; see Graph::gradient.
inline std::vector<Tensor> backward(const Tensor& root, const std::vector<Tensor>& wrt,
                                    bool create_graph = false) {
  if (root.size() != 1) {
    throw std::invalid_argument("backward root must be a scalar, got shape " +
                                to_string(root.shape()));
  }
  if (root.graph() == nullptr) {
    std::vector<Tensor> out;
    out.reserve(wrt.size());
    for (const auto& w : wrt) out.push_back(Tensor::zeros(w.shape()));
    return out;
  }
  return root.graph()->gradient(root, wrt, create_graph);
}

/// Detached copy of `t` registered as a fresh leaf of `g`.
inline Tensor make_leaf(Graph& g, const Tensor& t) { return g.leaf(t.detach()); }

}  // namespace calsam::ad
