#pragma once

#include <deque>
#include <functional>
#include <string>
#include <utility>

#include "whistle/numerics/tensor.hpp"

namespace whistle {

template <class T>
class Tape;

/// Handle to a value recorded on a Tape.
template <class T>
struct Var {
  Tape<T>* tape = nullptr;
  size_t id = 0;

  const Tensor<T>& value() const { return tape->value(id); }
  const Shape& shape() const { return value().shape(); }
  bool requires_grad() const { return tape->requires_grad(id); }
};

/// Reverse-mode recording. Nodes are appended in evaluation order, so a
/// reverse sweep visits every node after all of its consumers.
template <class T>
class Tape {
 public:
  using Backward = std::function<void(Tape&, size_t)>;

  explicit Tape(bool grad_enabled = true) : grad_enabled_(grad_enabled) {}
  Tape(const Tape&) = delete;
  Tape& operator=(const Tape&) = delete;

  bool grad_enabled() const { return grad_enabled_; }

  Var<T> constant(Tensor<T> v) { return push(std::move(v), nullptr, false, {}); }

  Var<T> variable(Tensor<T> v) { return push(std::move(v), nullptr, grad_enabled_, {}); }

  // Leaf that reads externally owned storage; `ref` must outlive the tape.
  Var<T> leaf(const Tensor<T>& ref, bool requires_grad) {
    return push(Tensor<T>{}, &ref, grad_enabled_ && requires_grad, {});
  }

  template <class... Parents>
  Var<T> record(const char* op, Tensor<T> value, Backward fn, Parents... parents) {
    if (!value.all_finite()) {
      throw NumericError(std::string(op) + ": non-finite value in output of shape " + shape_str(value.shape()));
    }
    const bool rg = grad_enabled_ && (requires_grad(parents.id) || ...);
    return push(std::move(value), nullptr, rg, rg ? std::move(fn) : Backward{});
  }

  const Tensor<T>& value(size_t id) const {
    const Node& n = nodes_[id];
    return n.ref ? *n.ref : n.value;
  }

  bool requires_grad(size_t id) const { return nodes_[id].requires_grad; }

  // Gradient buffer of a node, zero-initialised on first access.
  Tensor<T>& grad(size_t id) {
    Node& n = nodes_[id];
    if (!n.has_grad) {
      n.grad = Tensor<T>(value(id).shape());
      n.has_grad = true;
    }
    return n.grad;
  }

  bool has_grad(size_t id) const { return nodes_[id].has_grad; }

  // Accumulation target for a parent, or nullptr when it does not need a gradient.
  T* grad_target(const Var<T>& v) { return requires_grad(v.id) ? grad(v.id).data() : nullptr; }

  void backward(const Var<T>& root) {
    if (root.value().size() != 1) {
      throw ShapeError("backward: root must be a scalar, got " + shape_str(root.shape()));
    }
    backward(root, Tensor<T>(root.shape(), T(1)));
  }

  // Reverse sweep seeded with d(objective)/d(root) = seed.
  void backward(const Var<T>& root, const Tensor<T>& seed) {
    if (seed.shape() != root.shape()) {
      throw ShapeError("backward: seed " + shape_str(seed.shape()) + " for root " + shape_str(root.shape()));
    }
    if (!requires_grad(root.id)) return;
    grad(root.id) = seed;
    for (size_t i = root.id + 1; i-- > 0;) {
      Node& n = nodes_[i];
      if (n.backward && has_grad(i)) n.backward(*this, i);
    }
  }

  size_t size() const { return nodes_.size(); }

 private:
  struct Node {
    Tensor<T> value;
    const Tensor<T>* ref = nullptr;
    Tensor<T> grad;
    bool has_grad = false;
    bool requires_grad = false;
    Backward backward;
  };

  Var<T> push(Tensor<T> value, const Tensor<T>* ref, bool rg, Backward fn) {
    nodes_.push_back(Node{std::move(value), ref, Tensor<T>{}, false, rg, std::move(fn)});
    return Var<T>{this, nodes_.size() - 1};
  }

  bool grad_enabled_;
  std::deque<Node> nodes_;
};

}  // namespace whistle
