#pragma once

#include <cstddef>
#include <functional>
#include <memory>
#include <numeric>
#include <sstream>
#include <string>
#include <utility>
#include <vector>

#include "leaml/error.hpp"

namespace leaml {

using Shape = std::vector<std::size_t>;

inline std::size_t shape_size(const Shape& shape) {
  return std::accumulate(shape.begin(), shape.end(), std::size_t{1},
                         std::multiplies<>());
}

inline std::string shape_string(const Shape& shape) {
  std::ostringstream os;
  os << '[';
  for (std::size_t i = 0; i < shape.size(); ++i) os << (i ? "x" : "") << shape[i];
  os << ']';
  return os.str();
}

/// Dense row-major array with an optional gradient buffer of the same shape.
template <typename T>
struct Tensor {
  Shape shape;
  std::vector<T> data;
  std::vector<T> grad;  // empty unless requires_grad
  bool requires_grad = false;

  Tensor() = default;
  Tensor(Shape s, std::vector<T> values, bool track_grad = false)
      : shape(std::move(s)), data(std::move(values)), requires_grad(track_grad) {
    if (data.size() != shape_size(shape)) {
      throw DimensionError("tensor data length " + std::to_string(data.size()) +
                           " does not match shape " + shape_string(shape));
    }
    for (auto e : shape) {
      if (e == 0) throw DimensionError("zero extent in shape " + shape_string(shape));
    }
    if (requires_grad) grad.assign(data.size(), T(0));
  }

  std::size_t size() const { return data.size(); }
  std::size_t rank() const { return shape.size(); }
  std::size_t rows() const { return shape.empty() ? 1 : shape[0]; }
  std::size_t cols() const { return shape.size() < 2 ? 1 : shape[1]; }

  T& at(std::size_t r, std::size_t c) { return data[r * cols() + c]; }
  T at(std::size_t r, std::size_t c) const { return data[r * cols() + c]; }

  void zero_grad() {
    if (requires_grad) std::fill(grad.begin(), grad.end(), T(0));
  }
};

/// Shared handle; the tape and the parameter store both refer to tensors by handle.
template <typename T>
using Var = std::shared_ptr<Tensor<T>>;

template <typename T>
Var<T> make_var(Shape shape, std::vector<T> values, bool requires_grad = false) {
  return std::make_shared<Tensor<T>>(std::move(shape), std::move(values), requires_grad);
}

template <typename T>
Var<T> zeros(Shape shape, bool requires_grad = false) {
  const std::size_t n = shape_size(shape);
  return make_var<T>(std::move(shape), std::vector<T>(n, T(0)), requires_grad);
}

/// Records differentiable operations in execution order. A disabled tape turns
/// every op into a plain forward computation.
template <typename T>
class Tape {
 public:
  explicit Tape(bool enabled = true) : enabled_(enabled) {}
  Tape(const Tape&) = delete;
  Tape& operator=(const Tape&) = delete;

  bool enabled() const { return enabled_; }
  std::size_t size() const { return outputs_.size(); }

  void record(Var<T> output, std::function<void()> backward) {
    outputs_.push_back(std::move(output));
    backward_.push_back(std::move(backward));
  }

  /// Propagates d(loss)/d(.) to every reachable tensor. Intermediate gradients
  /// are reset first; leaf gradients (parameters) accumulate.
  void backward(const Var<T>& loss) {
    if (!loss || loss->size() != 1) {
      throw InvalidInput("backward requires a scalar output");
    }
    if (!loss->requires_grad) {
      throw InvalidState("backward on a tensor that is not tracked by the tape");
    }
    for (auto& out : outputs_) out->zero_grad();
    loss->grad[0] = T(1);
    for (std::size_t i = backward_.size(); i-- > 0;) backward_[i]();
  }

  void clear() {
    outputs_.clear();
    backward_.clear();
  }

 private:
  bool enabled_;
  std::vector<Var<T>> outputs_;
  std::vector<std::function<void()>> backward_;
};

}  // namespace leaml
