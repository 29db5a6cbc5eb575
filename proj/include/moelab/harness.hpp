// SPDX-License-Identifier: Apache-2.0
#pragma once

#include <cstdint>
#include <filesystem>
#include <functional>
#include <optional>
#include <string>
#include <vector>

#include "moelab/gap_oracle.hpp"
#include "moelab/json.hpp"
#include "moelab/model.hpp"
#include "moelab/stats.hpp"
#include "moelab/trainer.hpp"

namespace moelab {

inline const std::vector<double> kDefaultLambdaGrid = {0.0, 0.001, 0.005, 0.01, 0.05, 0.1, 0.2};
inline const std::vector<std::uint64_t> kDefaultSeeds = {42, 123, 456, 789, 1337};

/// Environment variable that, when set, roots relative output directories.
inline constexpr const char* kOutputRootEnv = "MOELAB_OUTPUT_ROOT";
std::filesystem::path resolve_output_dir(const std::filesystem::path& requested);

struct ExperimentPlan {
  std::vector<double> lambda_grid = kDefaultLambdaGrid;
  std::vector<std::uint64_t> seeds = kDefaultSeeds;
  MoEModelConfig model = MoEModelConfig::desk();
  TrainConfig train;  // lambda and seed are overwritten per cell
  std::filesystem::path corpus_path;
  double val_split = 0.1;
  std::filesystem::path output_dir;
  std::size_t workers = 1;

  void validate() const;
};

void to_json(Json& j, const ExperimentPlan& p);
void from_json(const Json& j, ExperimentPlan& p);

struct CellResult {
  double lambda = 0.0;
  std::uint64_t seed = 0;
  bool ok = false;
  bool reused = false;  // loaded from a completed cell directory
  std::optional<MetricsRecord> final;
  std::string error;
  std::string directory;  // relative to the sweep output directory
};

void to_json(Json& j, const CellResult& c);
void from_json(const Json& j, CellResult& c);

struct SweepResult {
  ExperimentPlan plan;
  std::string corpus_digest;
  std::vector<CellResult> cells;  // plan order: λ-major, then seed

  std::size_t trained() const;
  std::size_t reused() const;
  std::vector<const CellResult*> failures() const;
};

void to_json(Json& j, const SweepResult& r);
void from_json(const Json& j, SweepResult& r);

/// Directory name of one (λ, seed) cell.
std::string cell_directory(double lambda, std::uint64_t seed);

struct SweepOptions {
  std::function<void(const CellResult&)> on_cell;
};

/// Runs every (λ, seed) cell of the plan. Completed cells (run.json with
/// status "completed" and matching configuration) are reused, failed cells are
/// recorded and the sweep continues. Writes plan.json, sweep.json, sweep.csv.
SweepResult run_sweep(const ExperimentPlan& plan, const SweepOptions& options = {});

/// Consolidated CSV (schema v1) of successful cells in plan order.
std::string sweep_csv(const SweepResult& result);
inline constexpr const char* kSweepCsvSchema = "# moelab-sweep-csv v1";

SweepResult load_sweep(const std::filesystem::path& sweep_dir);

/// Seed-averaged metrics of one λ.
struct GapRow {
  double lambda = 0.0;
  std::size_t n_seeds = 0;
  double mean_weight_mso = 0.0;
  double mean_activation_mso = 0.0;
  double ratio = 0.0;
  std::vector<double> per_layer_weight_mso;
  std::vector<double> per_layer_activation_mso;
  std::vector<double> per_layer_ratio;
};

struct Comparison {
  double baseline_lambda = 0.0;
  double treatment_lambda = 0.0;
  std::vector<std::uint64_t> seeds;  // pairing key
  stats::Summary baseline_val_loss;
  stats::Summary treatment_val_loss;
  stats::Summary baseline_perplexity;
  stats::Summary treatment_perplexity;
  double delta_percent = 0.0;  // of mean val loss, treatment vs baseline
  stats::PairedTestResult test;  // treatment − baseline
};

struct AnalysisOptions {
  double baseline_lambda = 0.0;
  double treatment_lambda = 0.001;
  /// Throw AnalysisScopeError unless correlation and comparison are both computable.
  bool require_complete = true;
};

struct AnalysisBundle {
  std::vector<GapRow> gap_table;
  std::optional<stats::CorrelationResult> correlation;  // weight vs activation MSO across λ
  std::string correlation_note;
  std::optional<Comparison> comparison;
  std::string comparison_note;
};

AnalysisBundle analyze_sweep(const SweepResult& result, const AnalysisOptions& options = {});

/// Writes gap_table.csv, correlation.json, comparison.json, layer_gap.csv,
/// gap_plot.dat and analysis.json into `dir`.
void write_analysis(const AnalysisBundle& bundle, const std::filesystem::path& dir);

std::string gap_table_csv(const AnalysisBundle& bundle);
std::string layer_gap_csv(const AnalysisBundle& bundle);
std::string gap_plot_data(const AnalysisBundle& bundle);
std::string describe(const AnalysisBundle& bundle);
void to_json(Json& j, const AnalysisBundle& b);

struct GapDemo {
  GapOracleReport report;
  std::string summary;
  Json json;
};

/// Gap oracle plus its human-readable and JSON renderings; writes
/// gap_demo.json into `output_dir` when given.
GapDemo run_gap_demo(std::size_t d_model, std::size_t d_ffn, std::size_t trials, std::uint64_t seed,
                     const std::optional<std::filesystem::path>& output_dir = std::nullopt);

/// 17-significant-digit rendering used by every CSV writer.
std::string format_double(double v);

}  // namespace moelab
