#pragma once

#include <cstddef>
#include <functional>
#include <span>
#include <stdexcept>
#include <string>
#include <utility>
#include <vector>

#include "icft/numerics/tensor.hpp"

namespace icft::numerics {

class GraphError : public std::logic_error {
 public:
  using std::logic_error::logic_error;
};

/// Handle to a value recorded on a Graph.
struct Var {
  std::size_t id = 0;
};

class Graph;

using BackwardFn = std::function<void(Graph&, std::span<const double> grad_out)>;

/// Tape of primitive applications in forward order.
///
/// Nodes are appended as operations execute, so the record is always a valid
/// topological order and backward() simply walks it in reverse. A Graph built
/// with `record_gradients = false` keeps values only; it is the evaluation
/// mode used for scoring and decoding.
class Graph {
 public:
  explicit Graph(bool record_gradients = true) : recording_(record_gradients) {}

  Graph(const Graph&) = delete;
  Graph& operator=(const Graph&) = delete;
  Graph(Graph&&) = default;
  Graph& operator=(Graph&&) = default;

  bool recording() const { return recording_; }

  /// Leaf that never receives gradients.
  Var constant(Tensor value) { return push(std::move(value), false, {}); }

  /// Leaf that receives a gradient when `value.requires_grad()` is set.
  Var leaf(Tensor value) {
    const bool needs = recording_ && value.requires_grad();
    return push(std::move(value), needs, {});
  }

  /// Like leaf(), but refers to `value` without copying; it must outlive the graph.
  Var borrow(const Tensor& value) {
    const bool needs = recording_ && value.requires_grad();
    nodes_.push_back(Node{Tensor{}, &value, {}, needs, {}});
    return Var{nodes_.size() - 1};
  }

  /// Appends the result of a primitive. `fn` is dropped when no input needs a gradient.
  Var record(Tensor value, bool needs_grad, BackwardFn fn) {
    needs_grad = needs_grad && recording_;
    return push(std::move(value), needs_grad, needs_grad ? std::move(fn) : BackwardFn{});
  }

  const Tensor& value(Var v) const { return node(v).get(); }
  bool needs_grad(Var v) const { return node(v).needs_grad; }
  std::size_t size() const { return nodes_.size(); }

  /// Gradient buffer for accumulation during backward; allocated on first use.
  std::span<double> grad_buffer(Var v) {
    auto& n = node(v);
    if (n.grad.empty()) n.grad.assign(n.get().size(), 0.0);
    return n.grad;
  }

  /// Gradient of the last backward() target with respect to `v` (zeros if unreached).
  Tensor grad(Var v) const {
    const auto& n = node(v);
    Tensor g(n.get().shape(), 0.0);
    if (!n.grad.empty()) std::copy(n.grad.begin(), n.grad.end(), g.data().begin());
    return g;
  }

  void backward(Var loss) {
    if (consumed_) throw GraphError("backward() called twice without reset()");
    auto& root = node(loss);
    if (!root.get().is_scalar()) {
      throw GraphError("backward() needs a scalar loss, got shape " + to_string(root.get().shape()));
    }
    if (!root.needs_grad) throw GraphError("backward() on a loss detached from every trainable input");
    consumed_ = true;
    grad_buffer(loss)[0] = 1.0;
    for (std::size_t i = loss.id + 1; i-- > 0;) {
      auto& n = nodes_[i];
      if (!n.needs_grad || !n.backward || n.grad.empty()) continue;
      n.backward(*this, n.grad);
    }
  }

  /// Clears all gradients so backward() may run again.
  void reset() {
    for (auto& n : nodes_) n.grad.clear();
    consumed_ = false;
  }

 private:
  struct Node {
    Tensor value;
    const Tensor* borrowed = nullptr;
    std::vector<double, AlignedAllocator<double>> grad;
    bool needs_grad = false;
    BackwardFn backward;

    const Tensor& get() const { return borrowed ? *borrowed : value; }
  };

  Var push(Tensor value, bool needs_grad, BackwardFn fn) {
    nodes_.push_back(Node{std::move(value), nullptr, {}, needs_grad, std::move(fn)});
    return Var{nodes_.size() - 1};
  }

  Node& node(Var v) {
    if (v.id >= nodes_.size()) throw GraphError("unknown graph value " + std::to_string(v.id));
    return nodes_[v.id];
  }
  const Node& node(Var v) const {
    if (v.id >= nodes_.size()) throw GraphError("unknown graph value " + std::to_string(v.id));
    return nodes_[v.id];
  }

  std::vector<Node> nodes_;
  bool recording_ = true;
  bool consumed_ = false;
};

}  // namespace icft::numerics
