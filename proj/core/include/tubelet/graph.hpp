#pragma once

#include <cstddef>
#include <functional>
#include <stdexcept>
#include <string>
#include <utility>
#include <vector>

#include "tubelet/tensor.hpp"

namespace tubelet {

/// Handle to a node recorded on a Graph.
struct Var {
  std::size_t id = static_cast<std::size_t>(-1);
};

/// Define-by-run tape for reverse-mode differentiation.
///
/// Every operation appends one node holding its output value; node ids are
/// therefore already a topological order. A Graph is single-threaded; build
/// a fresh one per forward pass.
template <typename T>
class Graph {
 public:
  using TensorT = BasicTensor<T>;
  /// Reads `grad(self)` and accumulates into the grads of the node's inputs.
  using BackwardFn = std::function<void(Graph&, std::size_t self)>;

  Var input(TensorT value, bool requires_grad = false) {
    nodes_.push_back(Node{std::move(value), {}, {}, {}, requires_grad, "input"});
    return Var{nodes_.size() - 1};
  }

  /// Appends an operation node. The backward closure is dropped when no
  /// input requires a gradient.
  Var record(TensorT value, std::vector<std::size_t> inputs, BackwardFn fn, const char* op) {
    bool needs = false;
    for (auto i : inputs) {
      if (i >= nodes_.size()) throw std::invalid_argument(std::string(op) + ": unknown input node");
      needs = needs || nodes_[i].requires_grad;
    }
    nodes_.push_back(Node{std::move(value), {}, std::move(inputs), needs ? std::move(fn) : BackwardFn{},
                          needs, op});
    return Var{nodes_.size() - 1};
  }

  const TensorT& value(Var v) const { return node(v.id).value; }
  bool requires_grad(Var v) const { return node(v.id).requires_grad; }
  const char* op_name(Var v) const { return node(v.id).op; }
  const std::vector<std::size_t>& inputs(Var v) const { return node(v.id).inputs; }
  std::size_t size() const noexcept { return nodes_.size(); }

  /// Gradient of the last backward() loss w.r.t. `v`; zeros when `v` did not
  /// contribute.
  TensorT grad(Var v) const {
    const Node& n = node(v.id);
    if (n.grad.empty()) return TensorT(n.value.shape());
    return n.grad;
  }

  /// Lazily allocated, zero-initialised gradient buffer of node `id`.
  TensorT& grad_buffer(std::size_t id) {
    Node& n = nodes_.at(id);
    if (n.grad.empty()) n.grad = TensorT(n.value.shape());
    return n.grad;
  }
  const TensorT& value_of(std::size_t id) const { return nodes_.at(id).value; }
  bool needs_grad(std::size_t id) const { return nodes_.at(id).requires_grad; }

  void backward(Var loss) {
    const Node& l = node(loss.id);
    if (l.value.numel() != 1)
      throw std::invalid_argument("backward: loss must be a scalar, got shape " + shape_str(l.value.shape()));
    for (auto& n : nodes_) n.grad = TensorT{};
    visits_ = 0;
    grad_buffer(loss.id)[0] = T{1};
    for (std::size_t i = loss.id + 1; i-- > 0;) {
      Node& n = nodes_[i];
      if (!n.requires_grad || n.grad.empty()) continue;
      ++visits_;
      if (n.backward) n.backward(*this, i);
    }
  }

  /// Number of nodes whose backward step ran in the last backward().
  std::size_t backward_visits() const noexcept { return visits_; }

 private:
  struct Node {
    TensorT value;
    TensorT grad;
    std::vector<std::size_t> inputs;
    BackwardFn backward;
    bool requires_grad = false;
    const char* op = "";
  };

  const Node& node(std::size_t id) const {
    if (id >= nodes_.size()) throw std::invalid_argument("invalid graph node id");
    return nodes_[id];
  }

  std::vector<Node> nodes_;
  std::size_t visits_ = 0;
};

}  // namespace tubelet
