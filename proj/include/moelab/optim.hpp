// SPDX-License-Identifier: Apache-2.0
#pragma once

#include <cstddef>
#include <vector>

#include "moelab/model.hpp"

namespace moelab {

struct AdamWConfig {
  double lr = 5e-4;
  double beta1 = 0.9;
  double beta2 = 0.95;
  double eps = 1e-8;
  double weight_decay = 0.1;
};

/// AdamW with decoupled weight decay:
///   p ← p·(1 − lr·wd)              (decay-flagged parameters only)
///   m ← β₁m + (1−β₁)g,  v ← β₂v + (1−β₂)g²
///   p ← p − lr · m̂ / (√v̂ + ε),  m̂ = m/(1−β₁ᵗ), v̂ = v/(1−β₂ᵗ)
class AdamW {
 public:
  AdamW(std::vector<NamedParameter> params, AdamWConfig config);

  /// One update from the parameters' accumulated gradients (missing = zero).
  void step(double lr);
  void step() { step(config_.lr); }
  void zero_grad();

  std::size_t steps() const noexcept { return step_; }
  const AdamWConfig& config() const noexcept { return config_; }
  const std::vector<double>& first_moment(std::size_t i) const { return m_[i]; }
  const std::vector<double>& second_moment(std::size_t i) const { return v_[i]; }

 private:
  std::vector<NamedParameter> params_;
  AdamWConfig config_;
  std::vector<std::vector<double>> m_;
  std::vector<std::vector<double>> v_;
  std::size_t step_ = 0;
};

/// Global L2 norm of all gradients; rescales them in place when it exceeds `max_norm`.
double clip_grad_norm(std::vector<NamedParameter>& params, double max_norm);

}  // namespace moelab
