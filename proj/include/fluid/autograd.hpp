#pragma once

#include <functional>
#include <memory>
#include <string>
#include <unordered_map>
#include <utility>
#include <vector>

#include "fluid/tensor.hpp"

namespace fluid {

struct Node;
using NodePtr = std::shared_ptr<Node>;

/// Maps the gradient of a node's output to gradients of each parent. An empty
/// tensor in the result means "no contribution" for that parent.
using BackwardFn = std::function<std::vector<Tensor>(const Tensor& grad_out)>;

struct Node {
  Tensor value;
  std::vector<NodePtr> parents;
  BackwardFn backward;
  bool requires_grad = false;
  bool is_leaf = true;
};

namespace detail {
inline bool& grad_enabled_flag() {
  thread_local bool enabled = true;
  return enabled;
}
}  // namespace detail

inline bool grad_enabled() { return detail::grad_enabled_flag(); }

/// While alive, operations do not record a graph (inference mode).
class NoGradGuard {
 public:
  NoGradGuard() : prev_(detail::grad_enabled_flag()) { detail::grad_enabled_flag() = false; }
  ~NoGradGuard() { detail::grad_enabled_flag() = prev_; }
  NoGradGuard(const NoGradGuard&) = delete;
  NoGradGuard& operator=(const NoGradGuard&) = delete;

 private:
  bool prev_;
};

/// Handle to a value in the computation graph. Copying a Var shares the node.
class Var {
 public:
  Var() = default;
  explicit Var(Tensor value, bool requires_grad = false) : node_(std::make_shared<Node>()) {
    node_->value = std::move(value);
    node_->requires_grad = requires_grad;
  }

  static Var parameter(Tensor value) { return Var(std::move(value), true); }
  static Var constant(Tensor value) { return Var(std::move(value), false); }

  bool defined() const noexcept { return node_ != nullptr; }
  const Tensor& value() const { return node_->value; }
  const Shape& shape() const { return node_->value.shape(); }
  bool requires_grad() const noexcept { return node_ && node_->requires_grad; }
  const NodePtr& node() const noexcept { return node_; }

  /// Overwrite a leaf's value in place (optimizer updates, checkpoint loads).
  void assign(Tensor v) {
    if (v.shape() != node_->value.shape())
      throw DimensionError("assign " + shape_str(v.shape()) + " into " + shape_str(node_->value.shape()));
    node_->value = std::move(v);
  }

 private:
  NodePtr node_;
};

/// Builds an interior node. When no parent requires grad (or grad is disabled)
/// the result is a constant and the backward closure is dropped.
inline Var make_result(Tensor value, std::vector<Var> parents, BackwardFn backward) {
  bool needs = false;
  if (grad_enabled())
    for (const auto& p : parents) needs = needs || p.requires_grad();
  Var out(std::move(value), needs);
  if (needs) {
    auto& n = *out.node();
    n.is_leaf = false;
    n.parents.reserve(parents.size());
    for (auto& p : parents) n.parents.push_back(p.node());
    n.backward = std::move(backward);
  }
  return out;
}

class GradMap {
 public:
  bool contains(const Var& v) const { return grads_.count(v.node().get()) != 0; }

  /// Gradient for v; zeros of v's shape if v was unreachable from the root.
  Tensor at(const Var& v) const {
    auto it = grads_.find(v.node().get());
    if (it == grads_.end()) return Tensor(v.shape());
    return it->second;
  }

  std::unordered_map<const Node*, Tensor>& raw() { return grads_; }

 private:
  std::unordered_map<const Node*, Tensor> grads_;
};

namespace detail {

// Payloads may be shared with other tensors, so accumulation always writes a
// fresh buffer.
inline void accumulate(Tensor& into, const Tensor& g) {
  if (into.shape() != g.shape())
    throw DimensionError("gradient shape " + shape_str(g.shape()) + " does not match " +
                         shape_str(into.shape()));
  Tensor sum(into.shape());
  auto dst = sum.mutable_data();
  auto a = into.data();
  auto b = g.data();
  for (std::size_t i = 0; i < dst.size(); ++i) dst[i] = a[i] + b[i];
  into = std::move(sum);
}

}  // namespace detail

/// Reverse sweep from a scalar root. Returns gradients of every leaf that
/// requires grad and is reachable from the root.
inline GradMap backward(const Var& root) {
  if (!root.defined() || root.value().size() != 1)
    throw DimensionError("backward requires a scalar root, got shape " +
                         (root.defined() ? shape_str(root.shape()) : std::string("<undefined>")));
  GradMap out;
  if (!root.requires_grad()) return out;

  // Iterative post-order DFS gives a topological order.
  std::vector<Node*> order;
  std::unordered_map<Node*, std::size_t> index;
  std::vector<std::pair<Node*, std::size_t>> stack{{root.node().get(), 0}};
  index.emplace(root.node().get(), static_cast<std::size_t>(-1));
  while (!stack.empty()) {
    auto& [n, next] = stack.back();
    if (next < n->parents.size()) {
      Node* p = n->parents[next++].get();
      if (p->requires_grad && index.emplace(p, static_cast<std::size_t>(-1)).second)
        stack.emplace_back(p, 0);
    } else {
      index[n] = order.size();
      order.push_back(n);
      stack.pop_back();
    }
  }

  std::vector<Tensor> grads(order.size());
  std::vector<bool> has(order.size(), false);
  grads.back() = Tensor(root.shape(), 1.0);
  has.back() = true;

  for (std::size_t k = order.size(); k-- > 0;) {
    Node* n = order[k];
    if (!has[k]) continue;
    if (n->is_leaf) {
      out.raw()[n] = std::move(grads[k]);
      continue;
    }
    auto parent_grads = n->backward(grads[k]);
    grads[k] = Tensor();  // free as we go
    for (std::size_t i = 0; i < n->parents.size(); ++i) {
      Node* p = n->parents[i].get();
      if (!p->requires_grad || i >= parent_grads.size() || parent_grads[i].size() == 0) continue;
      const auto j = index.at(p);
      if (!has[j]) {
        grads[j] = std::move(parent_grads[i]);
        has[j] = true;
      } else {
        detail::accumulate(grads[j], parent_grads[i]);
      }
    }
  }
  return out;
}

}  // namespace fluid
