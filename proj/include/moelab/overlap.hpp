// SPDX-License-Identifier: Apache-2.0
#pragma once

#include <cstddef>
#include <span>
#include <vector>

#include "moelab/autograd.hpp"
#include "moelab/json.hpp"
#include "moelab/model.hpp"

namespace moelab {

/// Σ_{i<j} ⟨W̃_i, W̃_j⟩² for one layer, W̃ = vec(W)/‖vec(W)‖, recorded on the tape.
Var orthogonality_loss_layer(Tape& tape, std::span<const Var> w_up);

/// Sum of the per-layer losses. This is the single definition of the
/// regularizer; every other entry point below routes through it.
Var orthogonality_loss(Tape& tape, const std::vector<std::vector<Var>>& w_up_per_layer);

/// Binds every expert's W_up on `tape` and returns the summed loss.
Var orthogonality_loss(Tape& tape, MoEModel& model);

/// Gradient-free values of the same formula.
std::vector<double> orthogonality_loss_per_layer(const ExpertWeights& weights);
double orthogonality_loss_value(const ExpertWeights& weights);

struct WeightMso {
  std::vector<double> per_layer;
  double mean = 0.0;
};

/// Pair-averaged squared cosine of flattened W_up per layer, then the layer mean.
WeightMso weight_mso(const ExpertWeights& weights);

struct ActivationMso {
  std::vector<double> per_layer;
  std::vector<std::size_t> tokens_per_layer;  // tokens that contributed
  double mean = 0.0;
  std::size_t total_pairs = 0;
  std::size_t skipped_pairs = 0;  // pairs with a zero-norm output
  bool flagged = false;           // skipped fraction above 1%

  static constexpr double kSkipFlagFraction = 0.01;
};

/// Running estimate of activation MSO over a stream of routing traces.
///
/// Per token, the mean over selected pairs of the squared cosine between
/// unweighted expert outputs; per layer, the mean over tokens.
class ActivationMsoAccumulator {
 public:
  void add(const RoutingTrace& trace);
  ActivationMso result() const;
  bool empty() const noexcept { return layers_.empty(); }

 private:
  struct LayerSum {
    double sum = 0.0;
    std::size_t tokens = 0;
  };
  std::vector<LayerSum> layers_;
  std::size_t total_pairs_ = 0;
  std::size_t skipped_pairs_ = 0;
};

ActivationMso activation_mso(std::span<const RoutingTrace> traces);

struct OverlapReport {
  std::vector<double> per_layer_weight_mso;
  std::vector<double> per_layer_activation_mso;
  double mean_weight_mso = 0.0;
  double mean_activation_mso = 0.0;
  std::vector<double> per_layer_gap_ratio;  // activation / weight
  double gap_ratio = 0.0;                   // mean activation / mean weight
};

OverlapReport make_overlap_report(const WeightMso& weight, const ActivationMso& activation);

/// Field names: per_layer_weight_mso, per_layer_activation_mso, mean_weight_mso,
/// mean_activation_mso, per_layer_gap_ratio, gap_ratio. Non-finite ratios are null.
void to_json(Json& j, const OverlapReport& r);
void from_json(const Json& j, OverlapReport& r);

}  // namespace moelab
