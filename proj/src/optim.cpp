// SPDX-License-Identifier: Apache-2.0
#include "moelab/optim.hpp"

#include <cmath>

#include "moelab/errors.hpp"

namespace moelab {

AdamW::AdamW(std::vector<NamedParameter> params, AdamWConfig config)
    : params_(std::move(params)), config_(config) {
  if (!(config_.lr >= 0.0)) throw ConfigError("learning rate must be non-negative");
  if (!(config_.beta1 >= 0.0 && config_.beta1 < 1.0) || !(config_.beta2 >= 0.0 && config_.beta2 < 1.0)) {
    throw ConfigError("Adam betas must lie in [0, 1)");
  }
  if (!(config_.weight_decay >= 0.0)) throw ConfigError("weight decay must be non-negative");
  for (const auto& p : params_) {
    m_.emplace_back(p.tensor->numel(), 0.0);
    v_.emplace_back(p.tensor->numel(), 0.0);
  }
}

void AdamW::step(double lr) {
  ++step_;
  const double b1 = config_.beta1, b2 = config_.beta2;
  const double bc1 = 1.0 - std::pow(b1, static_cast<double>(step_));
  const double bc2 = 1.0 - std::pow(b2, static_cast<double>(step_));
  for (std::size_t i = 0; i < params_.size(); ++i) {
    Tensor& p = *params_[i].tensor;
    auto data = p.data();
    auto grad = p.grad_span_or_empty();
    auto& m = m_[i];
    auto& v = v_[i];
    const double decay = params_[i].decay ? 1.0 - lr * config_.weight_decay : 1.0;
    for (std::size_t j = 0; j < data.size(); ++j) {
      const double g = grad.empty() ? 0.0 : grad[j];
      if (params_[i].decay) data[j] *= decay;
      m[j] = b1 * m[j] + (1.0 - b1) * g;
      v[j] = b2 * v[j] + (1.0 - b2) * g * g;
      data[j] -= lr * (m[j] / bc1) / (std::sqrt(v[j] / bc2) + config_.eps);
    }
  }
}

void AdamW::zero_grad() {
  for (auto& p : params_) p.tensor->zero_grad();
}

double clip_grad_norm(std::vector<NamedParameter>& params, double max_norm) {
  if (!(max_norm > 0.0)) throw ConfigError("gradient clip norm must be positive");
  double sq = 0.0;
  for (auto& p : params)
    for (double g : p.tensor->grad_span_or_empty()) sq += g * g;
  const double norm = std::sqrt(sq);
  if (norm > max_norm) {
    const double s = max_norm / norm;
    for (auto& p : params)
      if (p.tensor->has_grad())
        for (double& g : p.tensor->grad()) g *= s;
  }
  return norm;
}

}  // namespace moelab
