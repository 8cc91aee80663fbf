#include "dar/tensor.hpp"

#include <sstream>
#include <unordered_set>

namespace dar {

namespace {
thread_local bool g_grad_enabled = true;
}  // namespace

std::string shape_string(const Shape& shape) {
  std::ostringstream out;
  out << '[';
  for (std::size_t i = 0; i < shape.size(); ++i) {
    if (i) out << 'x';
    out << shape[i];
  }
  out << ']';
  return out.str();
}

bool grad_enabled() noexcept { return g_grad_enabled; }

NoGradGuard::NoGradGuard() : previous_(g_grad_enabled) { g_grad_enabled = false; }
NoGradGuard::~NoGradGuard() { g_grad_enabled = previous_; }

GradModeGuard::GradModeGuard(bool enabled) : previous_(g_grad_enabled) { g_grad_enabled = enabled; }
GradModeGuard::~GradModeGuard() { g_grad_enabled = previous_; }

template <typename T>
void BasicTensor<T>::backward() {
  if (!node_) throw ContractError("backward() on an undefined tensor");
  if (node_->data.size() != 1) {
    throw ContractError("backward() requires a scalar loss, got shape " + shape_string(node_->shape));
  }
  if (node_->backward_done) throw ContractError("backward() called twice on the same graph");
  if (!node_->requires_grad) throw ContractError("backward() on a tensor that does not require grad");

  // Iterative post-order DFS; `order` ends up with inputs before consumers.
  std::vector<Node*> order;
  std::unordered_set<Node*> visited;
  std::vector<std::pair<Node*, std::size_t>> stack{{node_.get(), 0}};
  visited.insert(node_.get());
  while (!stack.empty()) {
    auto& [node, next] = stack.back();
    if (next < node->parents.size()) {
      Node* parent = node->parents[next++].get();
      if (parent->requires_grad && visited.insert(parent).second) stack.emplace_back(parent, 0);
    } else {
      order.push_back(node);
      stack.pop_back();
    }
  }

  node_->grad.assign(1, T(1));
  for (auto it = order.rbegin(); it != order.rend(); ++it) {
    Node* node = *it;
    if (node->backward_fn && !node->grad.empty()) node->backward_fn(*node);
  }
  // Release interior buffers; leaves keep their accumulated gradients.
  for (Node* node : order) {
    if (node->backward_fn) {
      node->backward_fn = nullptr;
      node->parents.clear();
      if (node != node_.get()) node->grad.clear();
    }
  }
  node_->backward_done = true;
}

template class BasicTensor<float>;
template class BasicTensor<double>;

}  // namespace dar
