// SPDX-License-Identifier: Apache-2.0
#include "moelab/overlap.hpp"

#include <cmath>
#include <limits>

#include "moelab/errors.hpp"

namespace moelab {

namespace {

void require_pairs(std::size_t n, const char* what) {
  if (n < 2) throw UndefinedMetricError(std::string(what) + " needs at least 2 experts per layer");
}

double ratio(double num, double den) {
  return den > 0.0 ? num / den : std::numeric_limits<double>::infinity();
}

Json finite_or_null(double v) { return std::isfinite(v) ? Json(v) : Json(nullptr); }

double from_finite_or_null(const Json& j) {
  return j.is_null() ? std::numeric_limits<double>::infinity() : j.get<double>();
}

}  // namespace

Var orthogonality_loss_layer(Tape& tape, std::span<const Var> w_up) {
  require_pairs(w_up.size(), "orthogonality loss");
  const std::size_t n = w_up.size();
  std::vector<Var> rows;
  rows.reserve(n);
  for (std::size_t i = 0; i < n; ++i) {
    const Var& w = w_up[i];
    double sq = 0.0;
    for (double v : w.value().data()) sq += v * v;
    if (!(sq > 0.0)) {
      throw DegenerateParameterError("expert " + std::to_string(i) + " has a zero-norm up-projection");
    }
    rows.push_back(ops::normalize(ops::reshape(w, {1, w.value().numel()})));
  }
  Var stacked = ops::concat_rows(rows);
  Var gram = ops::matmul_nt(stacked, stacked);
  Tensor upper({n, n});
  for (std::size_t i = 0; i < n; ++i)
    for (std::size_t j = i + 1; j < n; ++j) upper.at(i, j) = 1.0;
  return ops::sum(ops::mul(ops::mul(gram, gram), tape.constant(std::move(upper))));
}

Var orthogonality_loss(Tape& tape, const std::vector<std::vector<Var>>& w_up_per_layer) {
  if (w_up_per_layer.empty()) throw UndefinedMetricError("orthogonality loss needs at least one layer");
  Var total = orthogonality_loss_layer(tape, w_up_per_layer.front());
  for (std::size_t l = 1; l < w_up_per_layer.size(); ++l) {
    total = ops::add(total, orthogonality_loss_layer(tape, w_up_per_layer[l]));
  }
  return total;
}

Var orthogonality_loss(Tape& tape, MoEModel& model) {
  std::vector<std::vector<Var>> w;
  for (Block& b : model.blocks) {
    std::vector<Var> layer;
    for (Expert& e : b.moe.experts) layer.push_back(tape.parameter(e.w_up));
    w.push_back(std::move(layer));
  }
  return orthogonality_loss(tape, w);
}

std::vector<double> orthogonality_loss_per_layer(const ExpertWeights& weights) {
  std::vector<double> out;
  for (const auto& layer : weights) {
    Tape tape(false);
    std::vector<Var> vars;
    for (const Tensor* w : layer) vars.push_back(tape.constant(*w));
    out.push_back(orthogonality_loss_layer(tape, vars).item());
  }
  return out;
}

double orthogonality_loss_value(const ExpertWeights& weights) {
  Tape tape(false);
  std::vector<std::vector<Var>> vars;
  for (const auto& layer : weights) {
    std::vector<Var> v;
    for (const Tensor* w : layer) v.push_back(tape.constant(*w));
    vars.push_back(std::move(v));
  }
  return orthogonality_loss(tape, vars).item();
}

WeightMso weight_mso(const ExpertWeights& weights) {
  if (weights.empty()) throw UndefinedMetricError("weight MSO needs at least one layer");
  WeightMso out;
  for (const auto& layer : weights) {
    const std::size_t n = layer.size();
    require_pairs(n, "weight MSO");
    std::vector<double> norms(n);
    for (std::size_t i = 0; i < n; ++i) {
      double sq = 0.0;
      for (double v : layer[i]->data()) sq += v * v;
      if (!(sq > 0.0)) throw DegenerateParameterError("expert " + std::to_string(i) + " has a zero-norm up-projection");
      norms[i] = std::sqrt(sq);
    }
    double acc = 0.0;
    for (std::size_t i = 0; i < n; ++i) {
      for (std::size_t j = i + 1; j < n; ++j) {
        auto a = layer[i]->data();
        auto b = layer[j]->data();
        if (a.size() != b.size()) throw DimensionError("weight MSO: expert matrices differ in size");
        double dot = 0.0;
        for (std::size_t p = 0; p < a.size(); ++p) dot += a[p] * b[p];
        const double c = dot / (norms[i] * norms[j]);
        acc += c * c;
      }
    }
    out.per_layer.push_back(2.0 * acc / static_cast<double>(n * (n - 1)));
  }
  double s = 0.0;
  for (double v : out.per_layer) s += v;
  out.mean = s / static_cast<double>(out.per_layer.size());
  return out;
}

void ActivationMsoAccumulator::add(const RoutingTrace& trace) {
  if (trace.k < 2) throw UndefinedMetricError("activation MSO is undefined for k < 2 (no expert pairs)");
  if (trace.outputs.size() != trace.tokens * trace.k * trace.d_model) {
    throw DimensionError("routing trace outputs do not match tokens·k·d_model");
  }
  if (layers_.size() <= trace.layer) layers_.resize(trace.layer + 1);
  LayerSum& acc = layers_[trace.layer];
  const std::size_t k = trace.k;
  std::vector<double> norms(k);
  for (std::size_t t = 0; t < trace.tokens; ++t) {
    for (std::size_t s = 0; s < k; ++s) {
      double sq = 0.0;
      for (double v : trace.output(t, s)) sq += v * v;
      norms[s] = std::sqrt(sq);
    }
    double token_sum = 0.0;
    std::size_t used = 0;
    for (std::size_t i = 0; i < k; ++i) {
      for (std::size_t j = i + 1; j < k; ++j) {
        ++total_pairs_;
        if (!(norms[i] > 0.0) || !(norms[j] > 0.0)) {
          ++skipped_pairs_;
          continue;
        }
        auto a = trace.output(t, i);
        auto b = trace.output(t, j);
        double dot = 0.0;
        for (std::size_t p = 0; p < a.size(); ++p) dot += a[p] * b[p];
        const double c = dot / (norms[i] * norms[j]);
        token_sum += c * c;
        ++used;
      }
    }
    if (used == 0) continue;
    acc.sum += token_sum / static_cast<double>(used);
    ++acc.tokens;
  }
}

ActivationMso ActivationMsoAccumulator::result() const {
  if (layers_.empty()) throw UndefinedMetricError("activation MSO over an empty evaluation stream");
  ActivationMso out;
  double s = 0.0;
  for (std::size_t l = 0; l < layers_.size(); ++l) {
    if (layers_[l].tokens == 0) {
      throw UndefinedMetricError("activation MSO: layer " + std::to_string(l) + " has no usable tokens");
    }
    const double v = layers_[l].sum / static_cast<double>(layers_[l].tokens);
    out.per_layer.push_back(v);
    out.tokens_per_layer.push_back(layers_[l].tokens);
    s += v;
  }
  out.mean = s / static_cast<double>(out.per_layer.size());
  out.total_pairs = total_pairs_;
  out.skipped_pairs = skipped_pairs_;
  out.flagged = total_pairs_ > 0 && static_cast<double>(skipped_pairs_) >
                                        ActivationMso::kSkipFlagFraction * static_cast<double>(total_pairs_);
  return out;
}

ActivationMso activation_mso(std::span<const RoutingTrace> traces) {
  ActivationMsoAccumulator acc;
  for (const auto& t : traces) acc.add(t);
  return acc.result();
}

OverlapReport make_overlap_report(const WeightMso& weight, const ActivationMso& activation) {
  if (weight.per_layer.size() != activation.per_layer.size()) {
    throw DimensionError("overlap report: weight and activation layer counts differ");
  }
  OverlapReport r;
  r.per_layer_weight_mso = weight.per_layer;
  r.per_layer_activation_mso = activation.per_layer;
  r.mean_weight_mso = weight.mean;
  r.mean_activation_mso = activation.mean;
  for (std::size_t l = 0; l < weight.per_layer.size(); ++l) {
    r.per_layer_gap_ratio.push_back(ratio(activation.per_layer[l], weight.per_layer[l]));
  }
  r.gap_ratio = ratio(activation.mean, weight.mean);
  return r;
}

void to_json(Json& j, const OverlapReport& r) {
  Json ratios = Json::array();
  for (double v : r.per_layer_gap_ratio) ratios.push_back(finite_or_null(v));
  j = Json{{"per_layer_weight_mso", r.per_layer_weight_mso},
           {"per_layer_activation_mso", r.per_layer_activation_mso},
           {"mean_weight_mso", r.mean_weight_mso},
           {"mean_activation_mso", r.mean_activation_mso},
           {"per_layer_gap_ratio", ratios},
           {"gap_ratio", finite_or_null(r.gap_ratio)}};
}

void from_json(const Json& j, OverlapReport& r) {
  r.per_layer_weight_mso = j.at("per_layer_weight_mso").get<std::vector<double>>();
  r.per_layer_activation_mso = j.at("per_layer_activation_mso").get<std::vector<double>>();
  r.mean_weight_mso = j.at("mean_weight_mso").get<double>();
  r.mean_activation_mso = j.at("mean_activation_mso").get<double>();
  r.per_layer_gap_ratio.clear();
  for (const auto& v : j.at("per_layer_gap_ratio")) r.per_layer_gap_ratio.push_back(from_finite_or_null(v));
  r.gap_ratio = from_finite_or_null(j.at("gap_ratio"));
}

}  // namespace moelab
