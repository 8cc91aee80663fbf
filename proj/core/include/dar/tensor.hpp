#pragma once

#include <cmath>
#include <cstddef>
#include <functional>
#include <memory>
#include <numeric>
#include <span>
#include <string>
#include <vector>

#include "dar/error.hpp"

namespace dar {

using Shape = std::vector<std::size_t>;

inline std::size_t numel(const Shape& shape) {
  return std::accumulate(shape.begin(), shape.end(), std::size_t{1}, std::multiplies<>());
}

std::string shape_string(const Shape& shape);

/// One vertex of the define-by-run graph. Leaves have no backward function.
template <typename T>
struct TensorNode {
  Shape shape;
  std::vector<T> data;
  std::vector<T> grad;
  bool requires_grad = false;
  bool backward_done = false;
  std::vector<std::shared_ptr<TensorNode>> parents;
  // Reads this node's grad and accumulates into parents' grads.
  std::function<void(TensorNode&)> backward_fn;

  T* grad_buffer() {
    if (grad.empty()) grad.assign(data.size(), T(0));
    return grad.data();
  }
};

/// Gradient recording is on by default; a NoGradGuard disables it for the
/// current thread (evaluation passes, frozen-feature caching).
bool grad_enabled() noexcept;

class NoGradGuard {
 public:
  NoGradGuard();
  ~NoGradGuard();
  NoGradGuard(const NoGradGuard&) = delete;
  NoGradGuard& operator=(const NoGradGuard&) = delete;

 private:
  bool previous_;
};

/// Sets the recording mode for a scope, e.g. to differentiate inside an
/// evaluation pass that runs under a NoGradGuard.
class GradModeGuard {
 public:
  explicit GradModeGuard(bool enabled);
  ~GradModeGuard();
  GradModeGuard(const GradModeGuard&) = delete;
  GradModeGuard& operator=(const GradModeGuard&) = delete;

 private:
  bool previous_;
};

/// Dense row-major tensor with optional participation in reverse-mode
/// differentiation. Copies share the underlying node (handle semantics, like
/// a parameter reference); use clone() for an independent copy.
template <typename T>
class BasicTensor {
 public:
  using value_type = T;
  using Node = TensorNode<T>;

  BasicTensor() = default;
  explicit BasicTensor(Shape shape, T fill = T(0));
  BasicTensor(Shape shape, std::vector<T> data);
  explicit BasicTensor(std::shared_ptr<Node> node) : node_(std::move(node)) {}

  static BasicTensor scalar(T value) { return BasicTensor(Shape{}, std::vector<T>{value}); }

  bool defined() const noexcept { return node_ != nullptr; }
  const Shape& shape() const { return node_->shape; }
  std::size_t ndim() const { return node_->shape.size(); }
  std::size_t dim(std::size_t axis) const { return node_->shape.at(axis); }
  std::size_t size() const { return node_->data.size(); }

  std::span<T> data() { return node_->data; }
  std::span<const T> data() const { return node_->data; }
  T item() const;

  bool requires_grad() const { return node_ && node_->requires_grad; }
  BasicTensor& set_requires_grad(bool flag);
  bool has_grad() const { return node_ && !node_->grad.empty(); }
  std::span<const T> grad() const { return node_->grad; }
  void zero_grad() { node_->grad.clear(); }

  /// Same values, no graph history, independent storage.
  BasicTensor clone() const;
  /// Alias of clone(); reads better at call sites that cut the graph.
  BasicTensor detach() const { return clone(); }

  bool all_finite() const;
  /// Throws NonFiniteError naming `what` when any entry is NaN or infinite.
  void check_finite(const std::string& what) const;

  /// Runs reverse-mode differentiation from this scalar. Every leaf with
  /// requires_grad accumulates dThis/dLeaf. The graph is released afterwards,
  /// so a second call on the same result is a contract error.
  void backward();

  const std::shared_ptr<Node>& node() const { return node_; }

 private:
  std::shared_ptr<Node> node_;
};

using Tensor = BasicTensor<float>;
using Tensor64 = BasicTensor<double>;

/// Builds an op result. The backward function is attached only when gradient
/// recording is enabled and some input requires a gradient.
template <typename T>
BasicTensor<T> make_result(Shape shape, std::vector<T> data,
                           std::initializer_list<BasicTensor<T>> inputs,
                           std::function<void(TensorNode<T>&)> backward_fn) {
  auto node = std::make_shared<TensorNode<T>>();
  node->shape = std::move(shape);
  node->data = std::move(data);
  if (grad_enabled()) {
    bool any = false;
    for (const auto& in : inputs) any = any || in.requires_grad();
    if (any) {
      node->requires_grad = true;
      for (const auto& in : inputs) node->parents.push_back(in.node());
      node->backward_fn = std::move(backward_fn);
    }
  }
  return BasicTensor<T>(std::move(node));
}

// ---------------------------------------------------------------------------

template <typename T>
BasicTensor<T>::BasicTensor(Shape shape, T fill) : node_(std::make_shared<Node>()) {
  node_->data.assign(numel(shape), fill);
  node_->shape = std::move(shape);
}

template <typename T>
BasicTensor<T>::BasicTensor(Shape shape, std::vector<T> data) : node_(std::make_shared<Node>()) {
  if (numel(shape) != data.size()) {
    throw DimensionError("tensor data length " + std::to_string(data.size()) +
                         " does not match shape " + shape_string(shape));
  }
  node_->shape = std::move(shape);
  node_->data = std::move(data);
}

template <typename T>
T BasicTensor<T>::item() const {
  if (size() != 1) throw DimensionError("item() on tensor of shape " + shape_string(shape()));
  return node_->data[0];
}

template <typename T>
BasicTensor<T>& BasicTensor<T>::set_requires_grad(bool flag) {
  if (node_->backward_fn) throw ContractError("requires_grad can only be set on leaf tensors");
  node_->requires_grad = flag;
  return *this;
}

template <typename T>
BasicTensor<T> BasicTensor<T>::clone() const {
  return BasicTensor(node_->shape, node_->data);
}

template <typename T>
bool BasicTensor<T>::all_finite() const {
  for (T v : node_->data) {
    if (!std::isfinite(v)) return false;
  }
  return true;
}

template <typename T>
void BasicTensor<T>::check_finite(const std::string& what) const {
  if (!all_finite()) throw NonFiniteError(what + " contains NaN or infinite entries");
}

}  // namespace dar
