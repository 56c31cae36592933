#pragma once

#include <cstddef>
#include <deque>
#include <functional>
#include <initializer_list>
#include <string>
#include <string_view>
#include <vector>

#include "stampnet/tensor.hpp"

namespace stampnet {

/// A named learnable tensor (or a persistent buffer when `trainable` is
/// false) together with its accumulated gradient.
struct Parameter {
  std::string name;
  Tensor value;
  Tensor grad;
  bool trainable = true;

  Parameter() = default;
  Parameter(std::string n, Tensor v, bool is_trainable = true)
      : name(std::move(n)), value(std::move(v)), grad(Tensor::zeros_like(value)), trainable(is_trainable) {}

  void zero_grad() { grad = Tensor::zeros_like(value); }
};

class Tape;

/// Handle to a tensor recorded on a Tape. Cheap to copy; valid while the
/// tape is alive and has not been reset.
class Var {
 public:
  Var() = default;

  const Tensor& value() const;
  /// Accumulated gradient after Tape::backward; zeros if nothing reached it.
  Tensor grad() const;
  const Shape& shape() const { return value().shape(); }
  bool requires_grad() const;
  Tape& tape() const { return *tape_; }
  std::size_t id() const { return id_; }
  bool valid() const { return tape_ != nullptr; }

 private:
  friend class Tape;
  Var(Tape* tape, std::size_t id) : tape_(tape), id_(id) {}

  Tape* tape_ = nullptr;
  std::size_t id_ = 0;
};

/// Record of executed operations for reverse-mode differentiation.
///
/// Every differentiable op appends one node holding its output value and a
/// closure that, given the output gradient, accumulates into its inputs'
/// gradient buffers. backward() walks the nodes in exact reverse order of
/// recording. A tape supports a single backward pass; call reset() to reuse.
class Tape {
 public:
  using BackwardFn = std::function<void(Tape&, const Tensor& out_grad)>;

  Tape() = default;
  Tape(const Tape&) = delete;
  Tape& operator=(const Tape&) = delete;

  Var constant(Tensor value);
  /// Leaf that requires a gradient; read it back with Var::grad().
  Var variable(Tensor value);
  /// Leaf bound to `p`; backward adds this node's gradient into p.grad.
  /// The node references p.value, so `p` must outlive the tape and stay
  /// unmodified until backward has run.
  Var parameter(Parameter& p);

  /// Constant leaf that refers to `value` without copying it.
  Var reference(const Tensor& value);

  Var record(Tensor value, std::initializer_list<Var> inputs, BackwardFn backward,
             std::string_view op_name);

  void backward(const Var& loss);

  bool needs_grad(const Var& v) const { return node(v).requires_grad; }
  /// Gradient accumulator of `v`, allocated as zeros on first use.
  Tensor& grad_buffer(const Var& v);

  void reset();
  std::size_t size() const { return nodes_.size(); }
  bool backward_done() const { return backward_done_; }
  /// Node ids whose backward closures ran, in the order they ran.
  const std::vector<std::size_t>& backward_order() const { return backward_order_; }
  std::string_view op_name(std::size_t id) const { return nodes_.at(id).name; }

 private:
  friend class Var;

  struct Node {
    Tensor value;
    Tensor grad;
    bool requires_grad = false;
    Parameter* param = nullptr;
    BackwardFn backward;
    std::string_view name;
    const Tensor* external = nullptr;

    const Tensor& val() const { return external ? *external : value; }
  };

  Node& node(const Var& v);
  const Node& node(const Var& v) const;

  std::deque<Node> nodes_;
  std::vector<std::size_t> backward_order_;
  bool backward_done_ = false;
};

}  // namespace stampnet
