// SPDX-License-Identifier: Apache-2.0
#pragma once

#include <cstdint>
#include <filesystem>
#include <functional>
#include <optional>
#include <string>
#include <vector>

#include "moelab/data.hpp"
#include "moelab/json.hpp"
#include "moelab/model.hpp"
#include "moelab/optim.hpp"
#include "moelab/overlap.hpp"

namespace moelab {

enum class LrSchedule { kConstant, kCosine };

struct TrainConfig {
  double lr = 5e-4;
  double beta1 = 0.9;
  double beta2 = 0.95;
  double eps = 1e-8;
  double weight_decay = 0.1;
  std::size_t iterations = 2000;
  std::size_t batch_size = 16;
  std::size_t seq_len = 128;
  double lambda = 0.0;
  std::uint64_t seed = 42;
  std::size_t eval_interval = 200;
  std::optional<double> grad_clip;
  LrSchedule schedule = LrSchedule::kConstant;
  std::size_t warmup_iters = 0;
  double min_lr_ratio = 0.1;  // cosine floor as a fraction of lr
  /// Validation tokens used for val loss and activation MSO at each evaluation.
  std::size_t eval_tokens = 8192;
  /// When false the regularizer never enters the tape; its value is still
  /// measured for the metrics stream. Only meaningful with lambda == 0.
  bool build_orth_term = true;

  void validate() const;
  AdamWConfig adamw() const { return {lr, beta1, beta2, eps, weight_decay}; }
  double lr_at(std::size_t step) const;
};

void to_json(Json& j, const TrainConfig& c);
void from_json(const Json& j, TrainConfig& c);

/// One evaluation snapshot.
struct MetricsRecord {
  std::size_t step = 0;
  std::optional<double> train_loss;  // mean LM loss since the previous record
  double val_loss = 0.0;
  double orth_loss = 0.0;
  double lr = 0.0;
  OverlapReport overlap;
  std::size_t eval_tokens = 0;
  std::size_t skipped_activation_pairs = 0;
  bool activation_flagged = false;
};

void to_json(Json& j, const MetricsRecord& r);
void from_json(const Json& j, MetricsRecord& r);

struct StepResult {
  double lm_loss = 0.0;
  double orth_loss = 0.0;
  double total_loss = 0.0;
  double grad_norm = 0.0;
};

/// Forward, λ-weighted total loss, one backward pass, AdamW update.
/// Throws DivergenceError when a loss is not finite.
StepResult train_step(MoEModel& model, AdamW& optimizer, const Batch& batch, const TrainConfig& config,
                      std::size_t step);

struct EvalResult {
  double val_loss = 0.0;
  OverlapReport overlap;
  ActivationMso activation;
  std::size_t tokens = 0;
};

/// Gradient-free val loss plus weight and activation MSO on fixed validation windows.
EvalResult evaluate(MoEModel& model, const Corpus& corpus, std::size_t seq_len, std::size_t eval_tokens,
                    std::size_t batch_size);

struct RunOptions {
  /// When set: metrics.jsonl, run.json and checkpoint.bin are written here.
  std::optional<std::filesystem::path> output_dir;
  /// Called after every MetricsRecord (progress reporting).
  std::function<void(const MetricsRecord&)> on_record;
  /// Extra fields merged into run.json.
  Json metadata = Json::object();
};

struct TrainingRun {
  std::vector<MetricsRecord> records;
  MoEModel model;
  std::optional<std::filesystem::path> checkpoint;
  double wall_seconds = 0.0;
};

/// Full training run. The model is initialized from `train_config.seed`
/// (model_config.seed is overwritten) and evaluated at step 0, every
/// eval_interval steps, and at the final step.
TrainingRun run_training(MoEModelConfig model_config, const TrainConfig& train_config, const Corpus& corpus,
                         const RunOptions& options = {});

/// Resolved configuration written to run.json.
Json run_metadata(const MoEModelConfig& model_config, const TrainConfig& train_config, const Corpus& corpus);

std::string code_version();

}  // namespace moelab
