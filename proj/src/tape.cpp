#include "stampnet/tape.hpp"

namespace stampnet {

const Tensor& Var::value() const { return tape_->node(*this).val(); }

Tensor Var::grad() const {
  const auto& n = tape_->node(*this);
  return n.grad.empty() ? Tensor::zeros_like(n.val()) : n.grad;
}

bool Var::requires_grad() const { return tape_->needs_grad(*this); }

Tape::Node& Tape::node(const Var& v) {
  if (v.tape_ != this) throw UsageError("variable belongs to a different tape");
  return nodes_.at(v.id_);
}

const Tape::Node& Tape::node(const Var& v) const {
  if (v.tape_ != this) throw UsageError("variable belongs to a different tape");
  return nodes_.at(v.id_);
}

Var Tape::constant(Tensor value) {
  nodes_.push_back(Node{std::move(value), {}, false, nullptr, {}, "constant"});
  return Var(this, nodes_.size() - 1);
}

Var Tape::variable(Tensor value) {
  nodes_.push_back(Node{std::move(value), {}, true, nullptr, {}, "variable"});
  return Var(this, nodes_.size() - 1);
}

Var Tape::parameter(Parameter& p) {
  nodes_.push_back(Node{{}, {}, p.trainable, &p, {}, "parameter", &p.value});
  return Var(this, nodes_.size() - 1);
}

Var Tape::reference(const Tensor& value) {
  nodes_.push_back(Node{{}, {}, false, nullptr, {}, "reference", &value});
  return Var(this, nodes_.size() - 1);
}

Var Tape::record(Tensor value, std::initializer_list<Var> inputs, BackwardFn backward,
                 std::string_view op_name) {
  if (backward_done_) throw UsageError("cannot record onto a tape after backward; reset it first");
  bool any = false;
  for (const Var& in : inputs) any = any || node(in).requires_grad;
  nodes_.push_back(Node{std::move(value), {}, any, nullptr, any ? std::move(backward) : BackwardFn{},
                        op_name});
  return Var(this, nodes_.size() - 1);
}

Tensor& Tape::grad_buffer(const Var& v) {
  Node& n = node(v);
  if (n.grad.empty()) n.grad = Tensor::zeros_like(n.val());
  return n.grad;
}

void Tape::backward(const Var& loss) {
  if (backward_done_) throw UsageError("backward already ran on this tape; reset it first");
  Node& root = node(loss);
  if (root.val().size() != 1) {
    throw UsageError("backward requires a scalar loss, got shape " + shape_string(root.val().shape()));
  }
  backward_done_ = true;
  if (!root.requires_grad) return;
  grad_buffer(loss)[0] = 1.0;

  for (std::size_t id = loss.id_ + 1; id-- > 0;) {
    Node& n = nodes_[id];
    if (n.grad.empty()) continue;
    if (n.backward) {
      backward_order_.push_back(id);
      n.backward(*this, n.grad);
    }
    if (n.param != nullptr) {
      if (n.param->grad.shape() != n.val().shape()) n.param->grad = Tensor::zeros_like(n.val());
      n.param->grad.vec() += n.grad.vec();
    }
  }
}

void Tape::reset() {
  nodes_.clear();
  backward_order_.clear();
  backward_done_ = false;
}

}  // namespace stampnet
