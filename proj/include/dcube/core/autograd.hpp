#pragma once

#include <functional>
#include <memory>
#include <unordered_set>
#include <utility>
#include <vector>

#include "dcube/core/tensor.hpp"

namespace dcube {

// Reverse-mode autodiff at tensor granularity. Each op produces a Node that
// holds the forward value and, when some input requires gradients, the parent
// links plus a backward closure. Graphs are dynamic and freed when the last
// Var referencing them goes out of scope.
struct Node {
  Tensor value;
  Tensor grad;  // allocated lazily by ensure_grad()
  bool requires_grad = false;
  bool grad_ready = false;
  std::vector<std::shared_ptr<Node>> parents;
  std::function<void(Node&)> backfn;

  void ensure_grad() {
    if (!grad_ready) {
      grad = Tensor::zeros(value.shape());
      grad_ready = true;
    }
  }
};

using NodePtr = std::shared_ptr<Node>;

class Var {
 public:
  Var() = default;
  explicit Var(Tensor value, bool requires_grad = false) : node_(std::make_shared<Node>()) {
    node_->value = std::move(value);
    node_->requires_grad = requires_grad;
  }
  explicit Var(NodePtr n) : node_(std::move(n)) {}

  bool defined() const { return node_ != nullptr; }
  const Tensor& val() const { return node_->value; }
  Tensor& val() { return node_->value; }
  const Tensor& grad() const { return node_->grad; }
  bool requires_grad() const { return node_ && node_->requires_grad; }
  void set_requires_grad(bool rg) { node_->requires_grad = rg; }
  bool has_grad() const { return node_ && node_->grad_ready; }
  void zero_grad() {
    if (node_ && node_->grad_ready) std::fill(node_->grad.vec().begin(), node_->grad.vec().end(), 0.0);
  }
  double item() const {
    if (node_->value.numel() != 1) throw std::logic_error("Var::item on non-scalar");
    return node_->value[0];
  }
  NodePtr node() const { return node_; }
  Node* raw() const { return node_.get(); }

 private:
  NodePtr node_;
};

// Builds an op node. `backfn` is only retained when some parent needs
// gradients, so no-grad forward passes carry no graph.
inline Var make_op(Tensor value, std::vector<Var> parents, std::function<void(Node&)> backfn) {
  auto n = std::make_shared<Node>();
  n->value = std::move(value);
  bool rg = false;
  for (const auto& p : parents) rg = rg || p.requires_grad();
  n->requires_grad = rg;
  if (rg) {
    n->parents.reserve(parents.size());
    for (auto& p : parents) n->parents.push_back(p.node());
    n->backfn = std::move(backfn);
  }
  return Var(n);
}

inline Var constant(Tensor value) { return Var(std::move(value), false); }

// Accumulates into a parent's gradient buffer only when that parent is on a
// differentiable path.
inline Tensor* grad_sink(Node& self, size_t parent_idx) {
  Node* p = self.parents[parent_idx].get();
  if (!p->requires_grad) return nullptr;
  p->ensure_grad();
  return &p->grad;
}

// Runs reverse accumulation from a scalar root (seed gradient = 1).
inline void backward(const Var& root) {
  if (!root.requires_grad()) throw std::logic_error("backward: root does not require grad");
  if (root.val().numel() != 1) throw std::logic_error("backward: root must be scalar");

  // iterative post-order DFS
  std::vector<Node*> order;
  std::unordered_set<Node*> visited;
  std::vector<std::pair<Node*, size_t>> stack;
  stack.push_back({root.raw(), 0});
  visited.insert(root.raw());
  while (!stack.empty()) {
    auto& [n, idx] = stack.back();
    if (idx < n->parents.size()) {
      Node* p = n->parents[idx++].get();
      if (p->requires_grad && !visited.count(p)) {
        visited.insert(p);
        stack.push_back({p, 0});
      }
    } else {
      order.push_back(n);
      stack.pop_back();
    }
  }

  root.raw()->ensure_grad();
  root.raw()->grad[0] = 1.0;
  for (auto it = order.rbegin(); it != order.rend(); ++it) {
    Node* n = *it;
    if (n->backfn && n->grad_ready) n->backfn(*n);
  }
}

}  // namespace dcube
