#pragma once

#include <cstddef>
#include <limits>
#include <memory>
#include <numeric>
#include <span>
#include <sstream>
#include <stdexcept>
#include <string>
#include <vector>

namespace calsam::ad {

using Shape = std::vector<std::size_t>;

inline constexpr std::size_t kNoNode = std::numeric_limits<std::size_t>::max();

inline std::size_t element_count(const Shape& shape) {
  return std::accumulate(shape.begin(), shape.end(), std::size_t{1},
                         [](std::size_t a, std::size_t b) { return a * b; });
}

inline std::string to_string(const Shape& shape) {
  std::ostringstream os;
  os << '[';
  for (std::size_t i = 0; i < shape.size(); ++i) {
    if (i) os << ',';
    os << shape[i];
  }
  os << ']';
  return os.str();
}

class Graph;

namespace detail {
struct Recorder;
}

/// Dense row-major tensor of doubles. Values are immutable once created; a
/// tensor that carries a node handle takes part in gradient flow through its
/// graph, any other tensor is a constant.
class Tensor {
 public:
  Tensor() = default;

  Tensor(Shape shape, std::vector<double> values)
      : shape_(std::move(shape)),
        data_(std::make_shared<const std::vector<double>>(std::move(values))) {
    if (element_count(shape_) != data_->size()) {
      throw std::invalid_argument("tensor shape " + to_string(shape_) + " holds " +
                                  std::to_string(element_count(shape_)) + " elements, got " +
                                  std::to_string(data_->size()) + " values");
    }
  }

  static Tensor scalar(double v) { return Tensor(Shape{}, {v}); }
  static Tensor full(Shape shape, double v) {
    const auto n = element_count(shape);
    return Tensor(std::move(shape), std::vector<double>(n, v));
  }
  static Tensor zeros(Shape shape) { return full(std::move(shape), 0.0); }
  static Tensor ones(Shape shape) { return full(std::move(shape), 1.0); }

  bool defined() const { return data_ != nullptr; }
  const Shape& shape() const { return shape_; }
  std::size_t rank() const { return shape_.size(); }
  std::size_t size() const { return data_ ? data_->size() : 0; }
  std::span<const double> values() const { return {data_->data(), data_->size()}; }
  double operator[](std::size_t i) const { return (*data_)[i]; }

  double item() const {
    if (size() != 1) {
      throw std::invalid_argument("item() needs a single-element tensor, shape is " +
                                  to_string(shape_));
    }
    return (*data_)[0];
  }

  bool requires_grad() const { return graph_ != nullptr; }
  Graph* graph() const { return graph_; }
  std::size_t node() const { return node_; }
  inline bool is_leaf() const;

  /// Same values, no history.
  Tensor detach() const {
    Tensor t;
    t.shape_ = shape_;
    t.data_ = data_;
    return t;
  }

  std::vector<double> to_vector() const { return *data_; }

 private:
  friend class Graph;
  friend struct detail::Recorder;

  Shape shape_;
  std::shared_ptr<const std::vector<double>> data_;
  Graph* graph_ = nullptr;
  std::size_t node_ = kNoNode;
};

}  // namespace calsam::ad
