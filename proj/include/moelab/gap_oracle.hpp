// SPDX-License-Identifier: Apache-2.0
#pragma once

#include <cstddef>
#include <cstdint>
#include <string>
#include <vector>

#include "moelab/json.hpp"
#include "moelab/tensor.hpp"

namespace moelab {

/// Empirical behaviour of z₁ = W₁x, z₂ = W₂x for one constructed pair (W₁, W₂).
struct GapArm {
  std::string name;
  std::string description;
  double flattened_cosine = 0.0;  // ⟨vec W₁, vec W₂⟩ / (‖W₁‖‖W₂‖) = tr(W₁ᵀW₂)/(‖W₁‖‖W₂‖)
  double trace_w1t_w2 = 0.0;
  double max_abs_w1t_w2 = 0.0;  // largest |entry| of W₁ᵀW₂
  double mean_sq_cosine = 0.0;
  double mean_abs_cosine = 0.0;
  double max_abs_cosine = 0.0;
  double p10_abs_cosine = 0.0;
  double p50_abs_cosine = 0.0;
  double p90_abs_cosine = 0.0;
};

struct GapOracleReport {
  std::size_t d_model = 0;
  std::size_t d_ffn = 0;
  std::size_t trials = 0;
  std::uint64_t seed = 0;
  double floor = 0.0;
  /// "trace_zero" (Gram-Schmidt in flattened space), "skew" (W₂ = W₁S, S skew),
  /// "annihilating" (W₁ᵀW₂ = 0 exactly; control).
  std::vector<GapArm> arms;
  /// Mean squared cosine of the trace-zero arm exceeds `floor`.
  bool gap_demonstrated = false;

  const GapArm& arm(const std::string& name) const;
};

inline constexpr double kGapOracleFloor = 0.01;

/// Frobenius-orthogonal weight pairs versus activation orthogonality on
/// standard-normal inputs. Dimensions must be at least 2.
GapOracleReport gap_oracle(std::size_t d_model, std::size_t d_ffn, std::size_t trials, std::uint64_t seed);

/// Per-input activation cosines of a given pair, exposed for tests.
std::vector<double> activation_cosines(const Tensor& w1, const Tensor& w2, const std::vector<Tensor>& inputs);

void to_json(Json& j, const GapArm& a);
void to_json(Json& j, const GapOracleReport& r);
std::string describe(const GapOracleReport& r);

}  // namespace moelab
