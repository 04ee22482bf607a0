#pragma once

#include <array>
#include <cstddef>
#include <memory>
#include <string_view>
#include <vector>

#include "calsam/autodiff/kernels.hpp"
#include "calsam/autodiff/tensor.hpp"

namespace calsam::ad {

enum class Op {
  leaf,
  add,
  sub,
  mul,
  div,
  scale,
  add_scalar,
  matmul,
  transpose,
  conv3d,
  conv3d_input_grad,
  conv3d_weight_grad,
  relu,
  sigmoid,
  log,
  exp,
  pow,
  clamp,
  sum,
  mean,
  sum_squares,
  broadcast_to,
  sum_to,
  reshape,
  slice,
  slice_grad,
  resample,
  resample_adjoint,
};

inline std::string_view op_name(Op op) {
  static constexpr std::array<std::string_view, 28> names{
      "leaf",   "add",     "sub",          "mul",          "div",      "scale",
      "add_scalar", "matmul", "transpose",  "conv3d",       "conv3d_input_grad",
      "conv3d_weight_grad", "relu", "sigmoid", "log",       "exp",      "pow",
      "clamp",  "sum",     "mean",         "sum_squares",  "broadcast_to",
      "sum_to", "reshape", "slice",        "slice_grad",   "resample", "resample_adjoint"};
  return names[static_cast<std::size_t>(op)];
}

/// Per-op constants that are not tensors.
struct OpAttrs {
  double scalar = 0.0;
  double lo = 0.0;
  double hi = 0.0;
  Shape shape;
  std::size_t axis = 0;
  std::size_t start = 0;
  std::size_t length = 0;
  kernels::ConvGeometry conv;
  std::shared_ptr<const kernels::Resample1D> resample;
};

struct Node {
  Op op = Op::leaf;
  std::array<std::size_t, 2> inputs{kNoNode, kNoNode};
  std::vector<Tensor> saved;
  OpAttrs attrs;
  Shape shape;
};

/// Append-only computation record. Node inputs always precede the node.
/// While `recording()` is false, ops on tracked tensors produce constants;
/// backward without create_graph relies on this.
class Graph {
 public:
  Graph() = default;
  Graph(const Graph&) = delete;
  Graph& operator=(const Graph&) = delete;

  /// Registers a fresh differentiation leaf holding `value`'s data.
  Tensor leaf(const Tensor& value) {
    Node n;
    n.op = Op::leaf;
    n.shape = value.shape();
    nodes_.push_back(std::move(n));
    Tensor t = value.detach();
    t.graph_ = this;
    t.node_ = nodes_.size() - 1;
    return t;
  }

  bool recording() const { return recording_; }
  std::size_t size() const { return nodes_.size(); }
  const Node& node(std::size_t id) const { return nodes_.at(id); }

  /// Gradients of scalar `root` with respect to each tensor in `wrt`. With
  /// create_graph the backward pass is itself recorded, so the results are
  /// differentiable. Unreachable targets get zero gradients.
  std::vector<Tensor> gradient(const Tensor& root, const std::vector<Tensor>& wrt,
                               bool create_graph);

  class PauseScope {
   public:
    explicit PauseScope(Graph& g, bool record = false) : g_(g), prev_(g.recording_) {
      g_.recording_ = record;
    }
    ~PauseScope() { g_.recording_ = prev_; }
    PauseScope(const PauseScope&) = delete;
    PauseScope& operator=(const PauseScope&) = delete;

   private:
    Graph& g_;
    bool prev_;
  };

 private:
  friend struct detail::Recorder;

  Tensor push(Node n, std::vector<double> values) {
    Tensor t(n.shape, std::move(values));
    nodes_.push_back(std::move(n));
    t.graph_ = this;
    t.node_ = nodes_.size() - 1;
    return t;
  }

  std::vector<Node> nodes_;
  bool recording_ = true;
};

inline bool Tensor::is_leaf() const {
  return graph_ != nullptr && graph_->node(node_).op == Op::leaf;
}

}  // namespace calsam::ad
