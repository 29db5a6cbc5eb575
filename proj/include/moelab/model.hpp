// SPDX-License-Identifier: Apache-2.0
#pragma once

#include <cstddef>
#include <cstdint>
#include <span>
#include <string>
#include <vector>

#include "moelab/autograd.hpp"
#include "moelab/json.hpp"
#include "moelab/tensor.hpp"

namespace moelab {

struct MoEModelConfig {
  std::size_t vocab_size = 256;
  std::size_t d_model = 64;
  std::size_t n_layers = 2;
  std::size_t n_heads = 4;
  std::size_t n_experts = 4;
  std::size_t top_k = 2;
  std::size_t d_ffn = 256;
  std::size_t context_length = 128;
  bool tie_embeddings = false;
  std::uint64_t seed = 42;

  /// Minutes-scale default used by the CLI and the acceptance suite.
  static MoEModelConfig desk();
  /// Full-size shape (8 experts, 6 layers, 512/2048, top-2). Only for shape checks.
  static MoEModelConfig full_scale();

  /// Throws ConfigError on any violated field constraint.
  void validate() const;
  std::size_t parameter_count() const;

  bool operator==(const MoEModelConfig&) const = default;
};

void to_json(Json& j, const MoEModelConfig& c);
void from_json(const Json& j, MoEModelConfig& c);

struct LayerNormParams {
  Tensor gain;
  Tensor bias;
};

/// Feed-forward expert: h = W_down · LayerNorm(SiLU(W_up · x)). No projection biases.
struct Expert {
  Tensor w_up;    // [d_ffn × d_model]
  Tensor w_down;  // [d_model × d_ffn]
  LayerNormParams norm;
};

struct Router {
  Tensor w_gate;  // [n_experts × d_model]
};

struct MoELayer {
  Router router;
  std::vector<Expert> experts;
};

struct AttentionParams {
  Tensor wq, wk, wv, wo;  // each [d_model × d_model]
};

struct Block {
  LayerNormParams ln_attn;
  AttentionParams attn;
  LayerNormParams ln_moe;
  MoELayer moe;
};

struct NamedParameter {
  std::string name;
  Tensor* tensor;
  bool decay;  // receives decoupled weight decay
};

/// Per-layer list of expert up-projection matrices.
using ExpertWeights = std::vector<std::vector<const Tensor*>>;

/// Per-token routing record of one MoE layer.
///
/// Slot s of token t selected expert `experts[t·k + s]` with gate weight
/// `gates[t·k + s]`; `outputs` holds that expert's unweighted output h_i
/// (d_model values per slot, same order).
struct RoutingTrace {
  std::size_t layer = 0;
  std::size_t tokens = 0;
  std::size_t k = 0;
  std::size_t d_model = 0;
  std::vector<std::size_t> experts;
  std::vector<double> gates;
  std::vector<double> outputs;

  std::span<const double> output(std::size_t token, std::size_t slot) const {
    return std::span<const double>(outputs).subspan((token * k + slot) * d_model, d_model);
  }
};

class MoEModel {
 public:
  /// Allocates and initializes parameters from `config.seed`:
  /// projections and embeddings ~ N(0, 0.02), LayerNorm gain 1 and bias 0.
  explicit MoEModel(MoEModelConfig config);

  /// Allocates zero-filled parameters (checkpoint loading).
  static MoEModel uninitialized(MoEModelConfig config);

  const MoEModelConfig& config() const noexcept { return config_; }

  /// Stable enumeration order; names are the checkpoint keys.
  std::vector<NamedParameter> parameters();
  std::size_t parameter_count();

  ExpertWeights up_projections() const;
  void zero_grad();

  Tensor token_embedding;     // [vocab × d_model]
  Tensor position_embedding;  // [context × d_model]
  std::vector<Block> blocks;
  LayerNormParams ln_final;
  Tensor lm_head;  // [vocab × d_model]; unused when embeddings are tied

 private:
  MoEModel(MoEModelConfig config, bool initialize);
  MoEModelConfig config_;
};

/// Single-expert forward on rows of x ([n × d_model]) recorded on `tape`.
Var expert_forward(Tape& tape, Expert& expert, Var x);
/// Tape-free convenience: x is [d_model] or [n × d_model]; result has x's shape.
Tensor expert_forward(Expert& expert, const Tensor& x);

/// Top-k selection by logit with ties broken toward the lower expert index.
std::vector<std::size_t> select_top_k(std::span<const double> logits, std::size_t tokens, std::size_t n_experts,
                                      std::size_t k);

struct MoELayerOutput {
  Var output;
  RoutingTrace trace;
};

/// Router → top-k → softmax over the selected logits → Σ gate · h.
/// The trace is filled only when `record_trace` is set.
MoELayerOutput moe_layer_forward(Tape& tape, MoELayer& layer, Var x, std::size_t top_k, std::size_t layer_index,
                                 bool record_trace);

struct ForwardResult {
  Var logits;  // [batch·seq × vocab]
  std::vector<RoutingTrace> traces;
};

/// Causal forward over `batch` packed sequences of length `seq`.
ForwardResult forward(Tape& tape, MoEModel& model, std::span<const int> tokens, std::size_t batch, std::size_t seq,
                      bool record_traces);

struct SequenceOutput {
  Tensor logits;  // [seq × vocab]
  std::vector<RoutingTrace> traces;
};

/// Gradient-free forward of one token sequence.
SequenceOutput model_forward(MoEModel& model, std::span<const int> tokens);

}  // namespace moelab
