#pragma once

#include <functional>
#include <memory>
#include <unordered_map>
#include <unordered_set>
#include <utility>
#include <vector>

#include "psg/tensor.hpp"

namespace psg {

struct Node;
using NodePtr = std::shared_ptr<Node>;

// Gradients live outside the graph (one map per backward call) so that
// concurrent backward passes over shared parameter nodes never race.
using BackwardFn =
    std::function<void(const Tensor& grad_out, const std::vector<Tensor*>& parent_grads)>;

struct Node {
  Tensor value;
  std::vector<NodePtr> parents;
  BackwardFn backward;
  bool needs_grad = false;
  bool is_param = false;
};

namespace detail {
inline int& no_grad_depth() {
  thread_local int depth = 0;
  return depth;
}
}  // namespace detail

inline bool grad_enabled() { return detail::no_grad_depth() == 0; }

struct NoGradGuard {
  NoGradGuard() { ++detail::no_grad_depth(); }
  ~NoGradGuard() { --detail::no_grad_depth(); }
  NoGradGuard(const NoGradGuard&) = delete;
  NoGradGuard& operator=(const NoGradGuard&) = delete;
};

class Var {
 public:
  Var() = default;
  explicit Var(NodePtr n) : node_(std::move(n)) {}

  static Var leaf(Tensor value, bool param = false) {
    auto n = std::make_shared<Node>();
    n->value = std::move(value);
    n->is_param = param;
    n->needs_grad = param;
    return Var(std::move(n));
  }

  bool defined() const { return static_cast<bool>(node_); }
  const Tensor& value() const { return node_->value; }
  Tensor& mutable_value() { return node_->value; }
  const NodePtr& node() const { return node_; }
  bool needs_grad() const { return node_ && node_->needs_grad; }

  // Same value, no history.
  Var detach() const { return leaf(node_->value); }

 private:
  NodePtr node_;
};

// Builds an op node. When gradients are disabled or no input needs them, the
// graph edge is dropped and the result is a plain leaf.
inline Var make_op(Tensor value, std::vector<Var> inputs, BackwardFn backward) {
  bool track = grad_enabled();
  if (track) {
    bool any = false;
    for (const auto& v : inputs) any = any || v.needs_grad();
    track = any;
  }
  if (!track) return Var::leaf(std::move(value));
  auto n = std::make_shared<Node>();
  n->value = std::move(value);
  n->needs_grad = true;
  n->parents.reserve(inputs.size());
  for (auto& v : inputs) n->parents.push_back(v.node());
  n->backward = std::move(backward);
  return Var(std::move(n));
}

// Result of a backward pass: node -> accumulated gradient.
class GradMap {
 public:
  Tensor* find(const Node* n) {
    auto it = grads_.find(n);
    return it == grads_.end() ? nullptr : &it->second;
  }
  const Tensor* find(const Node* n) const {
    auto it = grads_.find(n);
    return it == grads_.end() ? nullptr : &it->second;
  }
  const Tensor* find(const Var& v) const { return find(v.node().get()); }

  // L2 norm of the gradient, 0 when the node never received one.
  double grad_norm(const Var& v) const {
    const Tensor* g = find(v.node().get());
    return g ? g->l2_norm() : 0.0;
  }

  Tensor& ensure(const Node* n, const std::vector<int>& shape) {
    auto it = grads_.find(n);
    if (it == grads_.end()) it = grads_.emplace(n, Tensor::zeros(shape)).first;
    return it->second;
  }

 private:
  std::unordered_map<const Node*, Tensor> grads_;
};

// Reverse-mode sweep from a scalar root. Deterministic: topological order is a
// function of graph construction order only.
inline GradMap backward(const Var& root) {
  if (root.value().size() != 1)
    throw Error(ErrorCode::Internal, "backward() root must be a scalar");
  GradMap grads;
  if (!root.needs_grad()) return grads;

  // iterative DFS post-order
  std::vector<Node*> order;
  std::unordered_set<Node*> visited;
  std::vector<std::pair<Node*, size_t>> stack;
  stack.emplace_back(root.node().get(), 0);
  visited.insert(root.node().get());
  while (!stack.empty()) {
    auto& [n, idx] = stack.back();
    if (idx < n->parents.size()) {
      Node* p = n->parents[idx++].get();
      if (p && p->needs_grad && !visited.count(p)) {
        visited.insert(p);
        stack.emplace_back(p, 0);
      }
    } else {
      order.push_back(n);
      stack.pop_back();
    }
  }

  grads.ensure(root.node().get(), {1}).fill(1.0f);

  for (auto it = order.rbegin(); it != order.rend(); ++it) {
    Node* n = *it;
    if (!n->backward) continue;
    Tensor* g = grads.find(n);
    if (!g) continue;
    std::vector<Tensor*> parent_grads(n->parents.size(), nullptr);
    for (size_t i = 0; i < n->parents.size(); ++i) {
      Node* p = n->parents[i].get();
      if (p && p->needs_grad) parent_grads[i] = &grads.ensure(p, p->value.shape());
    }
    n->backward(*g, parent_grads);
  }
  return grads;
}

}  // namespace psg
