// SPDX-License-Identifier: Apache-2.0
#include "moelab/autograd.hpp"

#include <algorithm>

#include "moelab/errors.hpp"

namespace moelab {

const Tensor& Var::value() const { return tape_->value(id_); }

double Var::item() const {
  const Tensor& v = value();
  if (v.numel() != 1) throw ContractError("item() on a non-scalar of shape " + shape_string(v.shape()));
  return v[0];
}

std::span<const double> Var::grad() const { return tape_->grad(id_); }

Var Tape::constant(Tensor value) {
  nodes_.push_back(Node{std::move(value), {}, {}, nullptr, false});
  return Var(this, nodes_.size() - 1);
}

Var Tape::parameter(Tensor& param) {
  if (auto it = bound_ids_.find(&param); it != bound_ids_.end()) return Var(this, it->second);
  Tensor copy(param.shape(), param.storage());
  nodes_.push_back(Node{std::move(copy), {}, {}, &param, grad_enabled_ && param.requires_grad()});
  bound_ids_.emplace(&param, nodes_.size() - 1);
  return Var(this, nodes_.size() - 1);
}

Var Tape::record(Tensor value, std::span<const Var> inputs, BackwardFn backward) {
  bool needs = false;
  for (const Var& in : inputs) {
    if (&in.tape() != this) throw ContractError("op mixes values from different tapes");
    needs = needs || nodes_[in.id()].needs_grad;
  }
  nodes_.push_back(Node{std::move(value), {}, needs ? std::move(backward) : BackwardFn{}, nullptr, needs});
  return Var(this, nodes_.size() - 1);
}

std::span<double> Tape::grad_buffer(std::size_t id) {
  Node& n = nodes_[id];
  if (n.grad.empty()) n.grad.assign(n.value.numel(), 0.0);
  return n.grad;
}

void Tape::backward(Var loss) {
  if (&loss.tape() != this) throw ContractError("loss belongs to another tape");
  if (nodes_[loss.id()].value.numel() != 1) {
    throw ContractError("backward needs a scalar loss, got shape " + shape_string(nodes_[loss.id()].value.shape()));
  }
  for (Node& n : nodes_) n.grad.clear();
  grad_buffer(loss.id())[0] = 1.0;
  for (std::size_t id = loss.id() + 1; id-- > 0;) {
    Node& n = nodes_[id];
    if (!n.needs_grad || n.grad.empty() || !n.backward) continue;
    n.backward(*this, id);
  }
  for (Node& n : nodes_) {
    if (n.bound == nullptr || n.grad.empty() || !n.bound->requires_grad()) continue;
    auto dst = n.bound->grad();
    for (std::size_t i = 0; i < dst.size(); ++i) dst[i] += n.grad[i];
  }
}

}  // namespace moelab
