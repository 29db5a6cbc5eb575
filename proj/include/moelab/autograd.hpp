// SPDX-License-Identifier: Apache-2.0
#pragma once

#include <cstddef>
#include <functional>
#include <span>
#include <unordered_map>
#include <vector>

#include "moelab/tensor.hpp"

namespace moelab {

class Tape;

/// Handle to a value recorded on a Tape. Cheap to copy; valid while the tape lives.
class Var {
 public:
  Var() = default;
  Var(Tape* tape, std::size_t id) : tape_(tape), id_(id) {}

  Tape& tape() const { return *tape_; }
  std::size_t id() const noexcept { return id_; }
  bool valid() const noexcept { return tape_ != nullptr; }

  const Tensor& value() const;
  const Shape& shape() const { return value().shape(); }
  double item() const;
  /// Gradient accumulated by the last backward pass; empty if none reached this node.
  std::span<const double> grad() const;

 private:
  Tape* tape_ = nullptr;
  std::size_t id_ = 0;
};

/// Define-by-run computation tape.
///
/// Nodes are appended in creation order, which is a topological order of the
/// graph; backward walks them once in reverse. Parameters enter the tape via
/// `parameter()`, which records a copy of the tensor's values and, after each
/// backward pass, adds the gradient into the tensor's own accumulator.
class Tape {
 public:
  using BackwardFn = std::function<void(Tape&, std::size_t self)>;

  /// A tape with gradients disabled records values only (evaluation).
  explicit Tape(bool grad_enabled = true) : grad_enabled_(grad_enabled) {}
  Tape(const Tape&) = delete;
  Tape& operator=(const Tape&) = delete;

  Var constant(Tensor value);
  /// Leaf bound to `param`. Repeated calls for the same tensor return the same Var.
  Var parameter(Tensor& param);

  /// Records an op node. `inputs` decide whether the node needs a gradient.
  Var record(Tensor value, std::span<const Var> inputs, BackwardFn backward);

  /// Reverse pass from a scalar. Intermediate gradients are reset first, so
  /// calling twice accumulates twice into bound parameters.
  void backward(Var loss);

  std::size_t size() const noexcept { return nodes_.size(); }
  const Tensor& value(std::size_t id) const { return nodes_[id].value; }
  bool needs_grad(std::size_t id) const { return nodes_[id].needs_grad; }
  std::span<const double> grad(std::size_t id) const { return nodes_[id].grad; }
  /// Mutable gradient buffer of a node, allocated on first use.
  std::span<double> grad_buffer(std::size_t id);

 private:
  struct Node {
    Tensor value;
    std::vector<double> grad;
    BackwardFn backward;
    Tensor* bound = nullptr;
    bool needs_grad = false;
  };

  std::vector<Node> nodes_;
  std::unordered_map<const Tensor*, std::size_t> bound_ids_;
  bool grad_enabled_ = true;
};

/// Differentiable operations. All matrices are rank-2 row-major.
namespace ops {

Var matmul(Var a, Var b);            // [m×k]·[k×n]
Var matmul_nt(Var a, Var b);         // [m×k]·[n×k]ᵀ
Var transpose(Var a);
Var add(Var a, Var b);               // same shape
Var add_row(Var a, Var row);         // [m×n] + [n] broadcast over rows
Var sub(Var a, Var b);
Var mul(Var a, Var b);               // elementwise
Var scale(Var a, double s);
Var silu(Var x);
Var layernorm(Var x, Var gain, Var bias, double eps = 1e-5);  // over the last axis
Var softmax(Var x);                                           // over the last axis
/// Mean token cross-entropy of logits [m×V] against integer targets.
Var cross_entropy(Var logits, std::span<const int> targets);
Var sum(Var x);
Var mean(Var x);
Var reshape(Var x, Shape shape);
Var slice_rows(Var x, std::size_t begin, std::size_t end);
Var concat_rows(std::span<const Var> parts);
Var gather_rows(Var x, std::span<const std::size_t> rows);
Var embedding(Var table, std::span<const int> ids);
/// x / ‖x‖ over all elements, shape preserved. Zero norm throws DegenerateParameterError.
Var normalize(Var x);

/// Multi-head causal self-attention on packed [batch·seq × d] q, k, v.
Var causal_attention(Var q, Var k, Var v, std::size_t batch, std::size_t seq, std::size_t heads);

/// Softmax over the selected logits of each row: out[t][s] uses logits[t][selected[t·k + s]].
Var topk_softmax(Var logits, std::span<const std::size_t> selected, std::size_t k);

/// Route of one (token, slot) pair into a per-expert output block.
struct SlotRoute {
  std::size_t expert;
  std::size_t row;
};

/// out[t] = Σ_s gates[t][s] · expert_out[route(t,s).expert][route(t,s).row]
Var moe_combine(Var gates, std::span<const Var> expert_outputs, std::span<const SlotRoute> routes,
                std::size_t tokens, std::size_t k);

}  // namespace ops

}  // namespace moelab
