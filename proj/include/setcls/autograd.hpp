#pragma once

#include "setcls/tensor.hpp"

#include <cstddef>
#include <functional>
#include <initializer_list>
#include <span>
#include <stdexcept>
#include <string>
#include <utility>
#include <vector>

namespace setcls {

template <typename T>
class Tape;

// Handle to a value recorded on a Tape.
template <typename T>
struct Var {
  Tape<T>* tape = nullptr;
  std::size_t id = 0;

  const Tensor<T>& value() const { return tape->value(*this); }
  const Shape& shape() const { return value().shape(); }
};

// Reverse-mode gradient tape. Values are recorded in evaluation order;
// backward() walks them in reverse and accumulates gradients into the
// Parameters that were bound with parameter().
//
// A Tape is single-use and single-threaded. Several tapes may read the same
// frozen model concurrently.
template <typename T>
class Tape {
 public:
  using Backprop = std::function<void(Tape&, std::size_t)>;

  Tape() { nodes_.reserve(256); }
  Tape(const Tape&) = delete;
  Tape& operator=(const Tape&) = delete;

  Var<T> constant(Tensor<T> value) { return leaf(std::move(value), nullptr, nullptr, false); }

  // Like constant(), but its gradient is kept and readable after backward().
  Var<T> input(Tensor<T> value) { return leaf(std::move(value), nullptr, nullptr, true); }

  // Reads the parameter in place; gradients are added to p.grad on backward().
  Var<T> parameter(Parameter<T>& p) { return leaf({}, &p.value, &p, true); }

  // Reads an external tensor in place without tracking its gradient.
  Var<T> frozen(const Tensor<T>& external) { return leaf({}, &external, nullptr, false); }

  const Tensor<T>& value(Var<T> v) const { return value(v.id); }
  const Tensor<T>& value(std::size_t id) const {
    const Node& n = nodes_[id];
    return n.external ? *n.external : n.owned;
  }

  bool requires_grad(std::size_t id) const { return nodes_[id].requires_grad; }

  // Gradient of the last backward() pass; zeros if the node was not reached.
  Tensor<T> grad(Var<T> v) const {
    const Node& n = nodes_[v.id];
    if (!n.grad.empty() && n.grad.shape() == value(v.id).shape()) return n.grad;
    return Tensor<T>(value(v.id).shape());
  }

  // Records the result of an op. `parents` decides whether the result needs
  // a gradient; non-finite results are rejected.
  Var<T> push(Tensor<T> value, std::initializer_list<std::size_t> parents, Backprop backprop,
              const char* op) {
    return push(std::move(value), std::span<const std::size_t>(parents.begin(), parents.size()),
                std::move(backprop), op);
  }

  Var<T> push(Tensor<T> value, std::span<const std::size_t> parents, Backprop backprop,
              const char* op) {
    if (!value.all_finite()) {
      throw std::domain_error(std::string(op) + ": non-finite value in result");
    }
    bool needs = false;
    for (std::size_t p : parents) needs = needs || nodes_[p].requires_grad;
    Node n;
    n.owned = std::move(value);
    n.op = op;
    n.requires_grad = needs;
    if (needs) n.backprop = std::move(backprop);
    nodes_.push_back(std::move(n));
    return Var<T>{this, nodes_.size() - 1};
  }

  const Tensor<T>& upstream(std::size_t id) const { return nodes_[id].grad; }

  // Gradient buffer of a parent, allocated on first use. Callers must check
  // requires_grad(id) first.
  Tensor<T>& accum(std::size_t id) {
    Node& n = nodes_[id];
    if (n.grad.empty() || n.grad.shape() != value(id).shape()) n.grad = Tensor<T>(value(id).shape());
    return n.grad;
  }

  void backward(Var<T> loss) {
    if (loss.tape != this) throw std::invalid_argument("backward: loss recorded on another tape");
    if (value(loss.id).size() != 1) {
      throw std::invalid_argument("backward: loss must be a scalar, got shape " +
                                  shape_string(value(loss.id).shape()));
    }
    for (Node& n : nodes_) n.grad = Tensor<T>();
    if (!nodes_[loss.id].requires_grad) return;
    accum(loss.id).fill(T(1));
    for (std::size_t i = loss.id + 1; i-- > 0;) {
      Node& n = nodes_[i];
      if (n.grad.empty() || !n.backprop) continue;
      n.backprop(*this, i);
    }
    for (Node& n : nodes_) {
      if (!n.param || n.grad.empty()) continue;
      Parameter<T>& p = *n.param;
      if (p.grad.size() != p.value.size() || p.grad.shape() != p.value.shape()) p.zero_grad();
      p.grad.mat() += n.grad.mat();
    }
  }

  std::size_t size() const { return nodes_.size(); }

  // Name of the op that produced a node; "leaf" for inputs and parameters.
  const char* op(std::size_t id) const { return nodes_[id].op; }

 private:
  struct Node {
    Tensor<T> owned;
    const Tensor<T>* external = nullptr;
    Tensor<T> grad;
    Parameter<T>* param = nullptr;
    const char* op = "leaf";
    bool requires_grad = false;
    Backprop backprop;
  };

  Var<T> leaf(Tensor<T> owned, const Tensor<T>* external, Parameter<T>* param, bool tracked) {
    Node n;
    n.owned = std::move(owned);
    n.external = external;
    n.param = param;
    n.requires_grad = tracked;
    nodes_.push_back(std::move(n));
    return Var<T>{this, nodes_.size() - 1};
  }

  std::vector<Node> nodes_;
};

}  // namespace setcls
