#pragma once

#include <functional>
#include <map>
#include <memory>
#include <string>
#include <unordered_set>
#include <utility>
#include <vector>

#include "uae/common.hpp"

namespace uae {

// One node of a recorded computation graph. A fresh graph is built on
// every forward pass; only leaf parameters persist between passes.
template <class T>
struct Node {
  Shape shape;
  std::vector<T> value;
  std::vector<T> grad;  // allocated lazily during backward
  bool needs_grad = false;
  bool trainable = false;
  std::string param_id;  // non-empty only for trainable leaves
  std::vector<std::shared_ptr<Node>> parents;
  // Reads this->grad and accumulates into parents' grad buffers.
  std::function<void(Node&)> backward_fn;

  void ensure_grad() {
    if (grad.size() != value.size()) grad.assign(value.size(), T(0));
  }
};

namespace detail {
inline bool& grad_enabled_flag() {
  thread_local bool enabled = true;
  return enabled;
}
}  // namespace detail

// Disables graph recording in a scope (eval passes, metric evaluation).
struct NoGradGuard {
  bool prev;
  NoGradGuard() : prev(detail::grad_enabled_flag()) { detail::grad_enabled_flag() = false; }
  ~NoGradGuard() { detail::grad_enabled_flag() = prev; }
};

inline bool grad_enabled() { return detail::grad_enabled_flag(); }

// Dense n-dimensional value, immutable after creation except for leaf
// parameters which the optimizer updates in place between graphs.
template <class T>
class Tensor {
 public:
  Tensor() = default;
  explicit Tensor(std::shared_ptr<Node<T>> n) : n_(std::move(n)) {}

  static Tensor from_data(Shape shape, std::vector<T> data) {
    if (numel(shape) != static_cast<int64_t>(data.size()))
      throw ShapeError("tensor: shape " + shape_str(shape) + " does not match data length " +
                       std::to_string(data.size()));
    auto n = std::make_shared<Node<T>>();
    n->shape = std::move(shape);
    n->value = std::move(data);
    return Tensor(std::move(n));
  }

  static Tensor zeros(Shape shape) {
    std::vector<T> d(static_cast<size_t>(numel(shape)), T(0));
    return from_data(std::move(shape), std::move(d));
  }

  static Tensor full(Shape shape, T v) {
    std::vector<T> d(static_cast<size_t>(numel(shape)), v);
    return from_data(std::move(shape), std::move(d));
  }

  static Tensor scalar_of(T v) { return from_data({}, {v}); }

  static Tensor param(std::string id, Shape shape, std::vector<T> data) {
    Tensor t = from_data(std::move(shape), std::move(data));
    t.n_->trainable = true;
    t.n_->needs_grad = true;
    t.n_->param_id = std::move(id);
    return t;
  }

  bool valid() const { return n_ != nullptr; }
  const Shape& shape() const { return n_->shape; }
  int64_t rank() const { return static_cast<int64_t>(n_->shape.size()); }
  int64_t size() const { return static_cast<int64_t>(n_->value.size()); }
  int64_t dim(int64_t i) const { return n_->shape[static_cast<size_t>(i)]; }
  const std::vector<T>& data() const { return n_->value; }
  // Leaf mutation hook for the optimizer; never call on op outputs.
  std::vector<T>& leaf_data() { return n_->value; }
  T scalar() const {
    if (n_->value.size() != 1) throw ShapeError("scalar() on tensor of shape " + shape_str(n_->shape));
    return n_->value[0];
  }
  bool requires_grad() const { return n_->needs_grad; }
  bool trainable() const { return n_->trainable; }
  const std::string& param_id() const { return n_->param_id; }

  void set_trainable(bool on) {
    n_->trainable = on;
    n_->needs_grad = on;
  }

  // Value-copy with no graph attachment.
  Tensor detached() const { return from_data(n_->shape, n_->value); }

  template <class U>
  Tensor<U> cast() const {
    std::vector<U> d(n_->value.size());
    for (size_t i = 0; i < d.size(); ++i) d[i] = static_cast<U>(n_->value[i]);
    return Tensor<U>::from_data(n_->shape, std::move(d));
  }

  std::shared_ptr<Node<T>> node() const { return n_; }

 private:
  std::shared_ptr<Node<T>> n_;
};

// Gradients of a scalar loss w.r.t. trainable leaves, keyed by parameter id.
template <class T>
using GradientMap = std::map<std::string, Tensor<T>>;

template <class T>
GradientMap<T> backward(const Tensor<T>& loss) {
  if (numel(loss.shape()) != 1 || !loss.shape().empty())
    throw ShapeError("backward: loss must be a scalar, got shape " + shape_str(loss.shape()));
  if (!loss.requires_grad())
    throw ValueError("backward: loss is not attached to a computation graph");

  // Iterative post-order topological sort over needs_grad ancestors.
  std::vector<Node<T>*> order;
  std::unordered_set<Node<T>*> seen;
  std::vector<std::pair<Node<T>*, size_t>> stack;
  stack.emplace_back(loss.node().get(), 0);
  seen.insert(loss.node().get());
  while (!stack.empty()) {
    auto& [node, idx] = stack.back();
    if (idx < node->parents.size()) {
      Node<T>* p = node->parents[idx].get();
      ++idx;
      if (p->needs_grad && !seen.count(p)) {
        seen.insert(p);
        stack.emplace_back(p, 0);
      }
    } else {
      order.push_back(node);
      stack.pop_back();
    }
  }

  // Leaves persist across graphs, so reset rather than lazily allocate.
  for (Node<T>* n : order) n->grad.assign(n->value.size(), T(0));
  loss.node()->grad[0] = T(1);
  for (auto it = order.rbegin(); it != order.rend(); ++it) {
    Node<T>* n = *it;
    if (n->backward_fn) n->backward_fn(*n);
  }

  GradientMap<T> grads;
  for (Node<T>* n : order) {
    if (n->trainable && !n->param_id.empty())
      grads.emplace(n->param_id, Tensor<T>::from_data(n->shape, n->grad));
  }
  return grads;
}

// Variant that zero-fills gradients for trainable leaves the loss does
// not reach.
template <class T>
GradientMap<T> backward(const Tensor<T>& loss, const std::vector<Tensor<T>>& all_trainables) {
  GradientMap<T> grads = backward(loss);
  for (const auto& p : all_trainables) {
    if (!p.trainable()) continue;
    if (!grads.count(p.param_id())) grads.emplace(p.param_id(), Tensor<T>::zeros(p.shape()));
  }
  return grads;
}

}  // namespace uae
