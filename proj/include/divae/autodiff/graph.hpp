#pragma once

#include <functional>
#include <memory>
#include <string>
#include <unordered_set>
#include <utility>
#include <vector>

#include "divae/autodiff/tensor.hpp"

namespace divae::ad {

struct Node;
using NodePtr = std::shared_ptr<Node>;

/// One value on the dynamic tape. `backward` reads `grad` and accumulates into
/// the parents' grads.
struct Node {
  Tensor value;
  Tensor grad;
  std::vector<NodePtr> parents;
  std::function<void(Node&)> backward;
  const char* op = "leaf";
  bool requires_grad = false;

  bool is_leaf() const noexcept { return parents.empty(); }
};

namespace detail {
inline int& no_grad_depth() {
  thread_local int depth = 0;
  return depth;
}
}  // namespace detail

/// While alive, new ops do not record parents (evaluation mode).
class NoGradGuard {
 public:
  NoGradGuard() { ++detail::no_grad_depth(); }
  ~NoGradGuard() { --detail::no_grad_depth(); }
  NoGradGuard(const NoGradGuard&) = delete;
  NoGradGuard& operator=(const NoGradGuard&) = delete;
};

inline bool grad_enabled() { return detail::no_grad_depth() == 0; }

/// Handle to a tape node. Copies share the node.
class Var {
 public:
  Var() : node_(std::make_shared<Node>()) {}
  explicit Var(Tensor value, bool requires_grad = false) : node_(std::make_shared<Node>()) {
    node_->value = std::move(value);
    node_->requires_grad = requires_grad;
  }
  explicit Var(NodePtr node) : node_(std::move(node)) {}

  const Tensor& value() const noexcept { return node_->value; }
  /// Direct access for optimizers and checkpoint loading; only meaningful on leaves.
  Tensor& mutable_value() noexcept { return node_->value; }
  const Tensor& grad() const noexcept { return node_->grad; }
  Tensor& mutable_grad() noexcept { return node_->grad; }
  const Shape& shape() const noexcept { return node_->value.shape(); }
  bool requires_grad() const noexcept { return node_->requires_grad; }
  const char* op() const noexcept { return node_->op; }
  const NodePtr& node() const noexcept { return node_; }
  double item() const { return node_->value.item(); }

  void zero_grad() { node_->grad = Tensor::zeros_like(node_->value); }

 private:
  NodePtr node_;
};

inline Var parameter(Tensor value) {
  Var v(std::move(value), true);
  v.zero_grad();
  return v;
}

inline Var constant(Tensor value) { return Var(std::move(value), false); }

inline Var scalar_constant(double v) { return constant(Tensor::scalar(v)); }

/// Builds the result node of an op. Records parents only when gradients are
/// enabled and some parent needs them; checks the forward value is finite.
inline Var make_result(const char* op, Tensor value, std::vector<Var> parents, std::function<void(Node&)> bw) {
  if (!value.all_finite()) throw NumericError(op, "non-finite forward value");
  auto node = std::make_shared<Node>();
  node->value = std::move(value);
  node->op = op;
  bool needs = false;
  if (grad_enabled()) {
    for (const auto& p : parents) needs = needs || p.requires_grad();
  }
  if (needs) {
    node->requires_grad = true;
    node->parents.reserve(parents.size());
    for (auto& p : parents) node->parents.push_back(p.node());
    node->backward = std::move(bw);
  }
  return Var(std::move(node));
}

/// Adds `g` into the parent's grad if that parent tracks gradients.
inline void accumulate(Node& parent, const Tensor& g) {
  if (!parent.requires_grad) return;
  if (parent.grad.shape() != parent.value.shape()) parent.grad = Tensor::zeros_like(parent.value);
  auto dst = parent.grad.values();
  auto src = g.values();
  for (std::size_t i = 0; i < dst.size(); ++i) dst[i] += src[i];
}

/// Reverse accumulation from a scalar loss. Intermediate grads are reset at the
/// start of every call; leaf grads accumulate across calls until zeroed.
inline void backward(const Var& loss) {
  require(loss.value().size() == 1 && loss.value().rank() <= 1,
          "backward: loss must be scalar, got shape " + shape_str(loss.shape()));
  if (!loss.requires_grad()) return;

  std::vector<Node*> order;
  std::unordered_set<Node*> seen;
  // Iterative post-order DFS; recursion depth is unbounded for long tapes.
  std::vector<std::pair<Node*, std::size_t>> stack{{loss.node().get(), 0}};
  seen.insert(loss.node().get());
  while (!stack.empty()) {
    auto& [node, next] = stack.back();
    if (next < node->parents.size()) {
      Node* p = node->parents[next++].get();
      if (p->requires_grad && !p->is_leaf() && seen.insert(p).second) stack.emplace_back(p, 0);
    } else {
      order.push_back(node);
      stack.pop_back();
    }
  }

  for (Node* n : order) n->grad = Tensor::zeros_like(n->value);
  loss.node()->grad.fill(1.0);

  for (auto it = order.rbegin(); it != order.rend(); ++it) {
    Node& n = **it;
    n.backward(n);
    for (const auto& p : n.parents) {
      if (p->requires_grad && !p->grad.all_finite()) throw NumericError(n.op, "non-finite gradient");
    }
  }
}

}  // namespace divae::ad
