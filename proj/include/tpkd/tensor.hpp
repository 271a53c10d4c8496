#pragma once
// Reverse-mode differentiable n-dimensional array.
//
// A Tensor is a shared handle to a node holding row-major data, an optional
// gradient buffer, and (for non-leaf results of differentiable ops) the
// parents and backward closure that produced it. backward() walks the graph
// in reverse topological order and then releases it.

#include <cstddef>
#include <functional>
#include <memory>
#include <numeric>
#include <span>
#include <string>
#include <unordered_set>
#include <utility>
#include <vector>

#include "tpkd/error.hpp"

namespace tpkd {

namespace detail {
inline bool& grad_mode_flag() {
  thread_local bool enabled = true;
  return enabled;
}
}  // namespace detail

/// Disables graph recording on the current thread for its lifetime.
class NoGradGuard {
 public:
  NoGradGuard() : previous_(detail::grad_mode_flag()) { detail::grad_mode_flag() = false; }
  ~NoGradGuard() { detail::grad_mode_flag() = previous_; }
  NoGradGuard(const NoGradGuard&) = delete;
  NoGradGuard& operator=(const NoGradGuard&) = delete;

 private:
  bool previous_;
};

inline bool grad_enabled() { return detail::grad_mode_flag(); }

inline size_t shape_numel(const std::vector<int>& shape) {
  size_t n = 1;
  for (int d : shape) n *= static_cast<size_t>(d);
  return n;
}

template <typename T>
struct TensorNode {
  std::vector<int> shape;
  std::vector<T> data;
  std::vector<T> grad;  // empty until a gradient reaches this node
  bool requires_grad = false;
  std::vector<std::shared_ptr<TensorNode>> parents;
  std::function<void(TensorNode&)> backward_fn;

  std::vector<T>& grad_buffer() {
    if (grad.empty()) grad.assign(data.size(), T(0));
    return grad;
  }
};

template <typename T>
class Tensor {
 public:
  using Node = TensorNode<T>;

  Tensor() = default;
  explicit Tensor(std::shared_ptr<Node> node) : node_(std::move(node)) {}

  static Tensor zeros(std::vector<int> shape, bool requires_grad = false) {
    auto n = std::make_shared<Node>();
    for (int d : shape) {
      if (d <= 0) throw ShapeError("tensor dimensions must be positive, got " + shape_str(shape));
    }
    n->data.assign(shape_numel(shape), T(0));
    n->shape = std::move(shape);
    n->requires_grad = requires_grad;
    return Tensor(std::move(n));
  }

  static Tensor from(std::vector<int> shape, std::vector<T> data, bool requires_grad = false) {
    if (shape_numel(shape) != data.size())
      throw ShapeError("data length " + std::to_string(data.size()) + " does not match shape " + shape_str(shape));
    auto n = std::make_shared<Node>();
    n->shape = std::move(shape);
    n->data = std::move(data);
    n->requires_grad = requires_grad;
    return Tensor(std::move(n));
  }

  static Tensor scalar(T v, bool requires_grad = false) { return from({1}, {v}, requires_grad); }

  bool defined() const { return static_cast<bool>(node_); }
  const std::vector<int>& shape() const { return node_->shape; }
  int dim(int i) const { return node_->shape.at(static_cast<size_t>(i < 0 ? i + rank() : i)); }
  int rank() const { return static_cast<int>(node_->shape.size()); }
  size_t numel() const { return node_->data.size(); }

  std::span<T> data() { return node_->data; }
  std::span<const T> data() const { return node_->data; }
  std::vector<T>& storage() { return node_->data; }
  const std::vector<T>& storage() const { return node_->data; }

  bool has_grad() const { return !node_->grad.empty(); }
  std::span<T> grad() { return node_->grad; }
  std::span<const T> grad() const { return node_->grad; }
  void zero_grad() { node_->grad.clear(); }

  bool requires_grad() const { return node_->requires_grad; }
  void set_requires_grad(bool v) { node_->requires_grad = v; }
  bool is_leaf() const { return !node_->backward_fn; }

  T item() const {
    if (numel() != 1) throw ShapeError("item() on tensor of shape " + shape_str(shape()));
    return node_->data[0];
  }

  /// Copy of the data with no graph attached.
  Tensor detach() const { return from(shape(), node_->data, false); }

  Node* node() const { return node_.get(); }
  const std::shared_ptr<Node>& node_ptr() const { return node_; }

 private:
  std::shared_ptr<Node> node_;
};

/// Creates the result node of a differentiable op. The graph is recorded
/// only when grad mode is on and some input requires a gradient.
template <typename T>
Tensor<T> make_result(std::vector<int> shape, std::vector<T> data, std::initializer_list<Tensor<T>> inputs,
                      std::function<void(TensorNode<T>&)> backward_fn) {
  auto out = Tensor<T>::from(std::move(shape), std::move(data));
  if (!grad_enabled()) return out;
  bool any = false;
  for (const auto& in : inputs) any = any || in.requires_grad();
  if (!any) return out;
  auto* node = out.node();
  node->requires_grad = true;
  for (const auto& in : inputs) node->parents.push_back(in.node_ptr());
  node->backward_fn = std::move(backward_fn);
  return out;
}

/// Accumulates gradients of `loss` into every reachable node that requires
/// them, then frees the recorded graph. Leaf gradients accumulate across
/// calls; callers zero them between optimizer steps.
template <typename T>
void backward(Tensor<T>& loss) {
  if (!loss.defined() || !loss.requires_grad())
    throw std::logic_error("backward() called on a tensor that is detached from any graph");
  if (loss.numel() != 1) throw ShapeError("backward() requires a scalar loss, got " + shape_str(loss.shape()));

  using Node = TensorNode<T>;
  std::vector<Node*> topo;
  std::unordered_set<Node*> seen;
  std::vector<std::pair<Node*, size_t>> stack{{loss.node(), 0}};
  seen.insert(loss.node());
  while (!stack.empty()) {
    auto& [n, next] = stack.back();
    if (next < n->parents.size()) {
      Node* p = n->parents[next++].get();
      if (p->requires_grad && seen.insert(p).second) stack.emplace_back(p, 0);
    } else {
      topo.push_back(n);
      stack.pop_back();
    }
  }

  loss.node()->grad_buffer()[0] += T(1);
  for (auto it = topo.rbegin(); it != topo.rend(); ++it) {
    Node* n = *it;
    if (n->backward_fn && !n->grad.empty()) n->backward_fn(*n);
  }
  for (Node* n : topo) {
    if (n->backward_fn) {
      n->backward_fn = nullptr;
      n->parents.clear();
      n->grad.clear();
      n->grad.shrink_to_fit();
      n->requires_grad = false;
    }
  }
}

}  // namespace tpkd
