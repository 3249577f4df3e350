#pragma once

#include <cstddef>
#include <deque>
#include <functional>
#include <string>
#include <utility>
#include <vector>

#include "cmdret/errors.hpp"
#include "cmdret/numerics/tensor.hpp"

namespace cmdret {

class Tape;

/// Handle to a node recorded on a Tape. Cheap to copy; valid until the tape
/// is reset.
struct Var {
  Tape* tape = nullptr;
  std::size_t id = 0;

  const Tensor& value() const;
  const Shape& shape() const { return value().shape(); }
  bool requires_grad() const;
};

/// Define-by-run reverse-mode recorder. Nodes are appended in evaluation
/// order; the node list is topologically sorted.
class Tape {
 public:
  // Receives the gradient flowing into the node's output and the output itself.
  using BackwardFn =
      std::function<void(Tape&, const Tensor& out_grad, const Tensor& out_value)>;

  Tape() = default;
  Tape(const Tape&) = delete;
  Tape& operator=(const Tape&) = delete;

  Var constant(Tensor value) { return push(std::move(value), false, {}); }
  Var leaf(Tensor value) { return push(std::move(value), true, {}); }

  /// Records an op output. The backward rule is kept only when some input
  /// needs a gradient.
  Var record(Tensor value, std::initializer_list<Var> inputs, BackwardFn fn) {
    bool needs = false;
    for (const Var& v : inputs) needs = needs || node(v.id).requires_grad;
    return push(std::move(value), needs, needs ? std::move(fn) : BackwardFn{});
  }
  Var record(Tensor value, const std::vector<Var>& inputs, BackwardFn fn) {
    bool needs = false;
    for (const Var& v : inputs) needs = needs || node(v.id).requires_grad;
    return push(std::move(value), needs, needs ? std::move(fn) : BackwardFn{});
  }

  const Tensor& value(std::size_t id) const { return node(id).value; }
  bool requires_grad(std::size_t id) const { return node(id).requires_grad; }

  /// Adds `g` into the gradient of node `id`; ignored for constants.
  void accumulate(std::size_t id, const Tensor& g) {
    Node& n = node(id);
    if (!n.requires_grad) return;
    if (n.value.shape() != g.shape()) {
      throw DimensionError("gradient shape " + shape_str(g.shape()) +
                           " does not match node shape " + shape_str(n.value.shape()));
    }
    if (!n.has_grad) {
      n.grad = g;
      n.has_grad = true;
      return;
    }
    for (std::size_t i = 0; i < g.size(); ++i) n.grad[i] += g[i];
  }

  /// Reverse sweep from a scalar. Allowed once between resets.
  void backward(Var loss) {
    if (loss.tape != this) throw ContractError("loss belongs to a different tape");
    if (node(loss.id).value.size() != 1) {
      throw ContractError("backward from non-scalar of shape " +
                          shape_str(node(loss.id).value.shape()));
    }
    if (backward_done_) throw StateError("backward called twice without reset");
    backward_done_ = true;
    if (!node(loss.id).requires_grad) return;
    accumulate(loss.id, Tensor(node(loss.id).value.shape(), 1.0));
    for (std::size_t i = loss.id + 1; i-- > 0;) {
      if (!nodes_[i].has_grad || !nodes_[i].backward) continue;
      const Tensor g = nodes_[i].grad;
      nodes_[i].backward(*this, g, nodes_[i].value);
    }
  }

  bool has_grad(Var v) const { return node(v.id).has_grad; }

  const Tensor& grad(Var v) const {
    const Node& n = node(v.id);
    if (!n.has_grad) throw StateError("node has no gradient");
    return n.grad;
  }

  /// Drops every node; outstanding Vars become invalid.
  void reset() {
    nodes_.clear();
    backward_done_ = false;
  }

  std::size_t size() const noexcept { return nodes_.size(); }

 private:
  struct Node {
    Tensor value;
    Tensor grad;
    bool requires_grad = false;
    bool has_grad = false;
    BackwardFn backward;
  };

  Var push(Tensor value, bool requires_grad, BackwardFn fn) {
    nodes_.push_back(Node{std::move(value), Tensor{}, requires_grad, false, std::move(fn)});
    return Var{this, nodes_.size() - 1};
  }

  Node& node(std::size_t id) {
    if (id >= nodes_.size()) throw StateError("stale tape reference");
    return nodes_[id];
  }
  const Node& node(std::size_t id) const {
    if (id >= nodes_.size()) throw StateError("stale tape reference");
    return nodes_[id];
  }

  std::deque<Node> nodes_;  // deque: values stay put while the tape grows
  bool backward_done_ = false;
};

inline const Tensor& Var::value() const { return tape->value(id); }
inline bool Var::requires_grad() const { return tape->requires_grad(id); }

}  // namespace cmdret
