#pragma once

// Reverse-mode differentiation over coarse tensor operations. A Tape records
// one forward pass; backward() walks it in reverse and accumulates into the
// Parameter objects that were bound with Tape::param().

#include "htrner/rng.hpp"
#include "htrner/tensor.hpp"

#include <cmath>
#include <deque>
#include <functional>
#include <initializer_list>
#include <limits>
#include <span>
#include <string>
#include <utility>
#include <vector>

namespace htrner {

template <class T>
struct Parameter {
  std::string name;
  Tensor<T> value;
  Tensor<T> grad;

  Parameter() = default;
  Parameter(std::string n, std::vector<int> shape) : name(std::move(n)), value(shape), grad(shape) {}

  void zero_grad() {
    if (grad.shape != value.shape) grad = Tensor<T>(value.shape);
    else grad.fill(T(0));
  }
};

struct Var {
  int id = -1;
  bool valid() const { return id >= 0; }
};

template <class T>
class Tape {
 public:
  explicit Tape(bool grad_enabled = true) : grad_enabled_(grad_enabled) {}
  Tape(const Tape&) = delete;
  Tape& operator=(const Tape&) = delete;

  bool grad_enabled() const { return grad_enabled_; }

  Var constant(Tensor<T> v) { return push(std::move(v), {}, {}); }

  Var param(Parameter<T>& p) {
    Node n;
    n.external = &p.value;
    n.param = &p;
    n.needs_grad = grad_enabled_;
    nodes_.push_back(std::move(n));
    return Var{static_cast<int>(nodes_.size()) - 1};
  }

  // Binds an externally owned tensor as a differentiable leaf (tests).
  Var leaf(Tensor<T> v) {
    Var id = push(std::move(v), {}, {});
    nodes_[id.id].needs_grad = grad_enabled_;
    return id;
  }

  const Tensor<T>& value(Var v) const {
    const Node& n = nodes_.at(static_cast<std::size_t>(v.id));
    return n.external ? *n.external : n.value;
  }
  const std::vector<int>& shape(Var v) const { return value(v).shape; }

  bool needs_grad(Var v) const { return nodes_.at(static_cast<std::size_t>(v.id)).needs_grad; }

  Tensor<T>& grad(Var v) {
    Node& n = nodes_.at(static_cast<std::size_t>(v.id));
    if (n.grad.shape.empty() && n.grad.data.empty()) n.grad = Tensor<T>(value(v).shape);
    return n.grad;
  }
  bool has_grad(Var v) const { return !nodes_.at(static_cast<std::size_t>(v.id)).grad.data.empty(); }

  Var push(Tensor<T> value, std::initializer_list<Var> inputs, std::function<void(const Tensor<T>&)> backward) {
    Node n;
    n.value = std::move(value);
    if (grad_enabled_) {
      for (Var in : inputs)
        if (in.valid() && needs_grad(in)) n.needs_grad = true;
    }
    if (n.needs_grad) n.backward = std::move(backward);
    nodes_.push_back(std::move(n));
    return Var{static_cast<int>(nodes_.size()) - 1};
  }

  // Seeds d(loss)/d(loss) = 1 and accumulates into bound parameters.
  void backward(Var loss) {
    require(value(loss).size() == 1, "backward() needs a scalar, got " + shape_str(value(loss).shape));
    if (!needs_grad(loss)) return;
    grad(loss).data[0] = T(1);
    for (int i = loss.id; i >= 0; --i) {
      Node& n = nodes_[static_cast<std::size_t>(i)];
      if (!n.needs_grad || n.grad.data.empty()) continue;
      if (n.backward) n.backward(n.grad);
      if (n.param) {
        Parameter<T>& p = *n.param;
        if (p.grad.shape != p.value.shape) p.grad = Tensor<T>(p.value.shape);
        for (std::size_t k = 0; k < p.grad.size(); ++k) p.grad[k] += n.grad[k];
      }
    }
  }

  std::size_t node_count() const { return nodes_.size(); }

 private:
  struct Node {
    Tensor<T> value;
    const Tensor<T>* external = nullptr;
    Tensor<T> grad;
    std::function<void(const Tensor<T>&)> backward;
    bool needs_grad = false;
    Parameter<T>* param = nullptr;
  };

  bool grad_enabled_;
  std::deque<Node> nodes_;
};

}  // namespace htrner
