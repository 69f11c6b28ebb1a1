#pragma once

#include <functional>
#include <memory>
#include <unordered_set>
#include <vector>

#include "nowcast/error.hpp"
#include "nowcast/tensor.hpp"

namespace nowcast {

// Reverse-mode autodiff over Tensor values. Each op records its inputs and a
// closure that maps the output gradient onto input gradients.

bool grad_enabled();

class NoGradGuard {
 public:
  NoGradGuard();
  ~NoGradGuard();
  NoGradGuard(const NoGradGuard&) = delete;
  NoGradGuard& operator=(const NoGradGuard&) = delete;

 private:
  bool previous_;
};

template <std::floating_point T>
struct Node {
  Tensor<T> value;
  Tensor<T> grad;
  bool requires_grad = false;
  std::vector<std::shared_ptr<Node>> inputs;
  std::function<void(Node&)> backward_fn;

  // Gradient buffer, zero-initialised on first use.
  Tensor<T>& grad_ref() {
    if (grad.empty() && value.numel() > 0) grad = Tensor<T>(value.shape());
    return grad;
  }
  Node& input(std::size_t i) { return *inputs[i]; }
  bool input_needs_grad(std::size_t i) const { return inputs[i]->requires_grad; }
};

template <std::floating_point T>
class Var {
 public:
  using Backward = std::function<void(Node<T>&)>;

  Var() = default;
  explicit Var(Tensor<T> value, bool requires_grad = false) : node_(std::make_shared<Node<T>>()) {
    node_->value = std::move(value);
    node_->requires_grad = requires_grad;
  }

  // Wraps an op result. The graph edge is only recorded when a gradient can flow.
  static Var from_op(Tensor<T> value, std::vector<Var> inputs, Backward backward) {
    Var out(std::move(value));
    if (!grad_enabled()) return out;
    bool needs = false;
    for (const auto& in : inputs) needs = needs || (in.defined() && in.requires_grad());
    if (!needs) return out;
    out.node_->requires_grad = true;
    for (auto& in : inputs) {
      out.node_->inputs.push_back(in.defined() ? in.node_ : std::make_shared<Node<T>>());
    }
    out.node_->backward_fn = std::move(backward);
    return out;
  }

  bool defined() const { return node_ != nullptr; }
  const Tensor<T>& value() const { return node_->value; }
  Tensor<T>& mutable_value() { return node_->value; }
  const Shape& shape() const { return node_->value.shape(); }
  std::int64_t numel() const { return node_->value.numel(); }
  const Tensor<T>& grad() const { return node_->grad; }
  Tensor<T>& mutable_grad() { return node_->grad_ref(); }
  bool requires_grad() const { return node_->requires_grad; }
  void set_requires_grad(bool on) { node_->requires_grad = on; }
  void zero_grad() { node_->grad = Tensor<T>(); }
  Node<T>& node() const { return *node_; }

  // Seeds d(self)/d(self) = 1 for a single-element result.
  void backward() {
    if (numel() != 1) throw ShapeError("backward() without seed requires a scalar");
    backward(Tensor<T>(shape(), T{1}));
  }

  void backward(const Tensor<T>& seed) {
    if (seed.shape() != shape()) throw ShapeError("backward seed shape mismatch");
    if (!requires_grad()) return;
    std::vector<Node<T>*> order;
    topo_sort(order);
    auto& g = node_->grad_ref();
    for (std::int64_t i = 0; i < g.numel(); ++i) g[i] += seed[i];
    for (auto it = order.rbegin(); it != order.rend(); ++it) {
      Node<T>* n = *it;
      if (n->backward_fn && !n->grad.empty()) n->backward_fn(*n);
    }
    // Intermediate gradients are no longer needed once propagated.
    for (Node<T>* n : order) {
      if (n->backward_fn) n->grad = Tensor<T>();
    }
  }

 private:
  void topo_sort(std::vector<Node<T>*>& order) const {
    std::unordered_set<Node<T>*> seen;
    std::vector<std::pair<Node<T>*, std::size_t>> stack{{node_.get(), 0}};
    seen.insert(node_.get());
    while (!stack.empty()) {
      auto& [n, next] = stack.back();
      if (next < n->inputs.size()) {
        Node<T>* child = n->inputs[next++].get();
        if (child->requires_grad && seen.insert(child).second) stack.push_back({child, 0});
      } else {
        order.push_back(n);
        stack.pop_back();
      }
    }
  }

  std::shared_ptr<Node<T>> node_;
};

}  // namespace nowcast
