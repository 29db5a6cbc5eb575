// SPDX-License-Identifier: Apache-2.0
#include "moelab/harness.hpp"

#include <atomic>
#include <charconv>
#include <cmath>
#include <cstdio>
#include <cstdlib>
#include <fstream>
#include <mutex>
#include <set>
#include <sstream>
#include <thread>

#include "moelab/data.hpp"
#include "moelab/errors.hpp"

namespace moelab {
namespace fs = std::filesystem;

namespace {

Json read_json(const fs::path& path) {
  std::ifstream in(path);
  if (!in) throw IoError("cannot read " + path.string());
  try {
    return Json::parse(in);
  } catch (const Json::exception& e) {
    throw IoError("malformed JSON in " + path.string() + ": " + e.what());
  }
}

void write_text(const fs::path& path, const std::string& text) {
  const fs::path tmp = path.string() + ".tmp";
  {
    std::ofstream out(tmp, std::ios::binary | std::ios::trunc);
    if (!out) throw IoError("cannot write " + path.string());
    out << text;
    if (!out) throw IoError("write failed for " + path.string());
  }
  fs::rename(tmp, path);
}

std::string shortest(double v) {
  char buf[64];
  auto res = std::to_chars(buf, buf + sizeof buf, v);
  return std::string(buf, res.ptr);
}

// Reuses a cell when its run.json reports completion under the same configuration.
std::optional<MetricsRecord> completed_cell(const fs::path& dir, const Json& expected_model, const Json& expected_train,
                                            const std::string& digest) {
  const fs::path run_json = dir / "run.json";
  if (!fs::exists(run_json) || !fs::exists(dir / "checkpoint.bin")) return std::nullopt;
  Json meta;
  try {
    meta = read_json(run_json);
  } catch (const IoError&) {
    return std::nullopt;
  }
  if (meta.value("status", "") != "completed" || !meta.contains("final")) return std::nullopt;
  if (meta["model_config"] != expected_model || meta["train_config"] != expected_train) return std::nullopt;
  if (meta["corpus"].value("digest_sha256", "") != digest) return std::nullopt;
  return meta["final"].get<MetricsRecord>();
}

double mean_of(const std::vector<double>& v) {
  double s = 0.0;
  for (double x : v) s += x;
  return s / static_cast<double>(v.size());
}

Json summary_json(const stats::Summary& s) {
  return Json{{"n", s.n}, {"mean", s.mean}, {"sample_std", s.sample_std ? Json(*s.sample_std) : Json(nullptr)}};
}

Json finite_or_null(double v) { return std::isfinite(v) ? Json(v) : Json(nullptr); }

}  // namespace

std::string format_double(double v) {
  if (std::isnan(v)) return "nan";
  if (std::isinf(v)) return v > 0 ? "inf" : "-inf";
  char buf[40];
  std::snprintf(buf, sizeof buf, "%.17g", v);
  return buf;
}

fs::path resolve_output_dir(const fs::path& requested) {
  if (requested.is_absolute()) return requested;
  if (const char* root = std::getenv(kOutputRootEnv); root && *root) return fs::path(root) / requested;
  return requested;
}

void ExperimentPlan::validate() const {
  if (lambda_grid.empty()) throw ConfigError("lambda grid is empty");
  std::set<double> seen;
  for (double l : lambda_grid) {
    if (!std::isfinite(l) || l < 0.0) throw ConfigError("lambda values must be finite and non-negative");
    if (!seen.insert(l).second) throw ConfigError("duplicate lambda value " + shortest(l));
  }
  if (seeds.empty()) throw ConfigError("seed list is empty");
  if (std::set<std::uint64_t>(seeds.begin(), seeds.end()).size() != seeds.size())
    throw ConfigError("duplicate seed");
  if (workers == 0) throw ConfigError("workers must be positive");
  if (!(val_split > 0.0 && val_split < 1.0)) throw ConfigError("val_split must lie in (0, 1)");
  model.validate();
  train.validate();
}

void to_json(Json& j, const ExperimentPlan& p) {
  j = Json{{"lambda_grid", p.lambda_grid}, {"seeds", p.seeds},          {"model_config", p.model},
           {"train_config", p.train},      {"corpus", p.corpus_path.string()}, {"val_split", p.val_split},
           {"output_dir", p.output_dir.string()}, {"workers", p.workers}};
}

void from_json(const Json& j, ExperimentPlan& p) {
  p.lambda_grid = j.at("lambda_grid").get<std::vector<double>>();
  p.seeds = j.at("seeds").get<std::vector<std::uint64_t>>();
  p.model = j.at("model_config").get<MoEModelConfig>();
  p.train = j.at("train_config").get<TrainConfig>();
  p.corpus_path = j.at("corpus").get<std::string>();
  p.val_split = j.at("val_split").get<double>();
  p.output_dir = j.at("output_dir").get<std::string>();
  p.workers = j.value("workers", std::size_t{1});
}

void to_json(Json& j, const CellResult& c) {
  j = Json{{"lambda", c.lambda}, {"seed", c.seed},  {"ok", c.ok}, {"reused", c.reused},
           {"error", c.error},   {"directory", c.directory}};
  j["final"] = c.final ? Json(*c.final) : Json(nullptr);
}

void from_json(const Json& j, CellResult& c) {
  c.lambda = j.at("lambda").get<double>();
  c.seed = j.at("seed").get<std::uint64_t>();
  c.ok = j.at("ok").get<bool>();
  c.reused = j.value("reused", false);
  c.error = j.value("error", "");
  c.directory = j.value("directory", "");
  c.final.reset();
  if (j.contains("final") && !j["final"].is_null()) c.final = j["final"].get<MetricsRecord>();
}

std::size_t SweepResult::trained() const {
  std::size_t n = 0;
  for (const auto& c : cells) n += c.ok && !c.reused;
  return n;
}

std::size_t SweepResult::reused() const {
  std::size_t n = 0;
  for (const auto& c : cells) n += c.reused;
  return n;
}

std::vector<const CellResult*> SweepResult::failures() const {
  std::vector<const CellResult*> out;
  for (const auto& c : cells)
    if (!c.ok) out.push_back(&c);
  return out;
}

void to_json(Json& j, const SweepResult& r) {
  j = Json{{"plan", r.plan}, {"corpus_digest_sha256", r.corpus_digest}, {"cells", r.cells},
           {"code_version", code_version()}};
  Json failed = Json::array();
  for (const auto* c : r.failures()) failed.push_back(Json{{"lambda", c->lambda}, {"seed", c->seed}, {"error", c->error}});
  j["failures"] = failed;
}

void from_json(const Json& j, SweepResult& r) {
  r.plan = j.at("plan").get<ExperimentPlan>();
  r.corpus_digest = j.value("corpus_digest_sha256", "");
  r.cells = j.at("cells").get<std::vector<CellResult>>();
}

std::string cell_directory(double lambda, std::uint64_t seed) {
  return "lambda_" + shortest(lambda) + "_seed_" + std::to_string(seed);
}

SweepResult run_sweep(const ExperimentPlan& plan_in, const SweepOptions& options) {
  plan_in.validate();
  ExperimentPlan plan = plan_in;
  plan.output_dir = resolve_output_dir(plan.output_dir);
  const Corpus corpus = load_corpus(plan.corpus_path, plan.val_split);
  fs::create_directories(plan.output_dir / "cells");
  write_text(plan.output_dir / "plan.json", Json(plan).dump(2) + "\n");

  SweepResult result;
  result.plan = plan;
  result.corpus_digest = corpus.digest;
  for (double l : plan.lambda_grid)
    for (std::uint64_t s : plan.seeds) {
      CellResult c;
      c.lambda = l;
      c.seed = s;
      c.directory = (fs::path("cells") / cell_directory(l, s)).string();
      result.cells.push_back(std::move(c));
    }

  std::atomic<std::size_t> next{0};
  std::mutex callback_mutex;
  auto worker = [&] {
    for (;;) {
      const std::size_t i = next.fetch_add(1);
      if (i >= result.cells.size()) return;
      CellResult& cell = result.cells[i];
      TrainConfig tc = plan.train;
      tc.lambda = cell.lambda;
      tc.seed = cell.seed;
      MoEModelConfig mc = plan.model;
      mc.seed = cell.seed;
      const fs::path dir = plan.output_dir / cell.directory;
      try {
        if (auto done = completed_cell(dir, Json(mc), Json(tc), corpus.digest)) {
          cell.final = std::move(done);
          cell.ok = true;
          cell.reused = true;
        } else {
          RunOptions ro;
          ro.output_dir = dir;
          ro.metadata = Json{{"sweep_cell", {{"lambda", cell.lambda}, {"seed", cell.seed}}}};
          TrainingRun run = run_training(mc, tc, corpus, ro);
          cell.final = run.records.back();
          cell.ok = true;
        }
      } catch (const std::exception& e) {
        cell.ok = false;
        cell.error = e.what();
      }
      if (options.on_cell) {
        std::lock_guard lock(callback_mutex);
        options.on_cell(cell);
      }
    }
  };
  const std::size_t n_workers = std::min(plan.workers, result.cells.size());
  if (n_workers <= 1) {
    worker();
  } else {
    std::vector<std::jthread> pool;
    for (std::size_t w = 0; w < n_workers; ++w) pool.emplace_back(worker);
  }

  write_text(plan.output_dir / "sweep.csv", sweep_csv(result));
  write_text(plan.output_dir / "sweep.json", Json(result).dump(2) + "\n");
  return result;
}

std::string sweep_csv(const SweepResult& result) {
  std::size_t layers = 0;
  for (const auto& c : result.cells)
    if (c.ok && c.final) layers = std::max(layers, c.final->overlap.per_layer_weight_mso.size());
  std::ostringstream out;
  out << kSweepCsvSchema << '\n';
  out << "lambda,seed,step,train_loss,val_loss,orth_loss,mean_weight_mso,mean_activation_mso,gap_ratio,"
         "skipped_activation_pairs";
  for (std::size_t l = 0; l < layers; ++l) out << ",weight_mso_l" << l;
  for (std::size_t l = 0; l < layers; ++l) out << ",activation_mso_l" << l;
  out << '\n';
  for (const auto& c : result.cells) {
    if (!c.ok || !c.final) continue;
    const MetricsRecord& r = *c.final;
    out << format_double(c.lambda) << ',' << c.seed << ',' << r.step << ','
        << (r.train_loss ? format_double(*r.train_loss) : std::string()) << ',' << format_double(r.val_loss) << ','
        << format_double(r.orth_loss) << ',' << format_double(r.overlap.mean_weight_mso) << ','
        << format_double(r.overlap.mean_activation_mso) << ',' << format_double(r.overlap.gap_ratio) << ','
        << r.skipped_activation_pairs;
    for (std::size_t l = 0; l < layers; ++l)
      out << ',' << (l < r.overlap.per_layer_weight_mso.size() ? format_double(r.overlap.per_layer_weight_mso[l]) : "");
    for (std::size_t l = 0; l < layers; ++l)
      out << ','
          << (l < r.overlap.per_layer_activation_mso.size() ? format_double(r.overlap.per_layer_activation_mso[l])
                                                            : "");
    out << '\n';
  }
  return out.str();
}

SweepResult load_sweep(const fs::path& sweep_dir) {
  const fs::path path = fs::is_directory(sweep_dir) ? sweep_dir / "sweep.json" : sweep_dir;
  try {
    return read_json(path).get<SweepResult>();
  } catch (const Json::exception& e) {
    throw IoError("unexpected sweep summary layout in " + path.string() + ": " + e.what());
  }
}

AnalysisBundle analyze_sweep(const SweepResult& result, const AnalysisOptions& options) {
  AnalysisBundle bundle;

  // λ order follows first appearance (the plan grid order).
  std::vector<double> lambdas;
  for (const auto& c : result.cells)
    if (c.ok && c.final && std::find(lambdas.begin(), lambdas.end(), c.lambda) == lambdas.end())
      lambdas.push_back(c.lambda);
  if (lambdas.empty()) throw AnalysisScopeError("sweep has no successful cells; nothing to analyze");

  for (double l : lambdas) {
    GapRow row;
    row.lambda = l;
    std::vector<double> w, a;
    std::vector<std::vector<double>> lw, la;
    for (const auto& c : result.cells) {
      if (!c.ok || !c.final || c.lambda != l) continue;
      const OverlapReport& o = c.final->overlap;
      w.push_back(o.mean_weight_mso);
      a.push_back(o.mean_activation_mso);
      if (lw.size() < o.per_layer_weight_mso.size()) lw.resize(o.per_layer_weight_mso.size());
      if (la.size() < o.per_layer_activation_mso.size()) la.resize(o.per_layer_activation_mso.size());
      for (std::size_t i = 0; i < o.per_layer_weight_mso.size(); ++i) lw[i].push_back(o.per_layer_weight_mso[i]);
      for (std::size_t i = 0; i < o.per_layer_activation_mso.size(); ++i)
        la[i].push_back(o.per_layer_activation_mso[i]);
    }
    row.n_seeds = w.size();
    row.mean_weight_mso = mean_of(w);
    row.mean_activation_mso = mean_of(a);
    row.ratio = row.mean_weight_mso > 0.0 ? row.mean_activation_mso / row.mean_weight_mso
                                          : std::numeric_limits<double>::quiet_NaN();
    for (auto& v : lw) row.per_layer_weight_mso.push_back(mean_of(v));
    for (auto& v : la) row.per_layer_activation_mso.push_back(mean_of(v));
    for (std::size_t i = 0; i < std::min(lw.size(), la.size()); ++i)
      row.per_layer_ratio.push_back(row.per_layer_weight_mso[i] > 0.0
                                        ? row.per_layer_activation_mso[i] / row.per_layer_weight_mso[i]
                                        : std::numeric_limits<double>::quiet_NaN());
    bundle.gap_table.push_back(std::move(row));
  }

  std::vector<std::string> missing;
  if (lambdas.size() < 3) {
    bundle.correlation_note = "correlation needs at least 3 lambda values with results; have " +
                              std::to_string(lambdas.size());
    missing.push_back(bundle.correlation_note);
  } else {
    std::vector<double> xs, ys;
    for (const auto& r : bundle.gap_table) {
      xs.push_back(r.mean_weight_mso);
      ys.push_back(r.mean_activation_mso);
    }
    try {
      bundle.correlation = stats::pearson(xs, ys);
    } catch (const StatisticsError& e) {
      bundle.correlation_note = std::string("no correlation computable: ") + e.what();
    }
  }

  std::vector<std::uint64_t> paired;
  std::vector<double> base, treat;
  auto final_for = [&](double l, std::uint64_t s) -> const MetricsRecord* {
    for (const auto& c : result.cells)
      if (c.ok && c.final && c.lambda == l && c.seed == s) return &*c.final;
    return nullptr;
  };
  std::vector<std::uint64_t> seed_order;
  for (const auto& c : result.cells)
    if (std::find(seed_order.begin(), seed_order.end(), c.seed) == seed_order.end()) seed_order.push_back(c.seed);
  for (std::uint64_t s : seed_order) {
    const MetricsRecord* b = final_for(options.baseline_lambda, s);
    const MetricsRecord* t = final_for(options.treatment_lambda, s);
    if (b && t) {
      paired.push_back(s);
      base.push_back(b->val_loss);
      treat.push_back(t->val_loss);
    }
  }
  if (paired.size() < 2) {
    bundle.comparison_note = "comparison of lambda=" + shortest(options.treatment_lambda) + " against lambda=" +
                             shortest(options.baseline_lambda) + " needs at least 2 paired seeds; have " +
                             std::to_string(paired.size());
    missing.push_back(bundle.comparison_note);
  } else {
    Comparison cmp;
    cmp.baseline_lambda = options.baseline_lambda;
    cmp.treatment_lambda = options.treatment_lambda;
    cmp.seeds = paired;
    cmp.baseline_val_loss = stats::summarize(base);
    cmp.treatment_val_loss = stats::summarize(treat);
    std::vector<double> pb, pt;
    for (double v : base) pb.push_back(std::exp(v));
    for (double v : treat) pt.push_back(std::exp(v));
    cmp.baseline_perplexity = stats::summarize(pb);
    cmp.treatment_perplexity = stats::summarize(pt);
    cmp.delta_percent = (cmp.treatment_val_loss.mean - cmp.baseline_val_loss.mean) / cmp.baseline_val_loss.mean * 100.0;
    try {
      cmp.test = stats::paired_t_test(treat, base);
      bundle.comparison = cmp;
    } catch (const StatisticsError& e) {
      bundle.comparison_note = std::string("paired test not computable: ") + e.what();
      cmp.test = stats::PairedTestResult{paired.size(), 0.0, 0.0, 0.0, paired.size() - 1, 1.0, false};
      bundle.comparison = cmp;
    }
  }

  if (options.require_complete && !missing.empty()) {
    std::string msg = "sweep does not support the full analysis:";
    for (const auto& m : missing) msg += "\n  - " + m;
    msg += "\n  computable: gap table for " + std::to_string(lambdas.size()) + " lambda value(s)";
    if (bundle.correlation || !bundle.correlation_note.empty()) msg += ", correlation";
    if (bundle.comparison) msg += ", comparison";
    msg += "\n  partial mode (analyze --partial) emits the computable parts";
    throw AnalysisScopeError(msg);
  }
  return bundle;
}

std::string gap_table_csv(const AnalysisBundle& bundle) {
  std::ostringstream out;
  out << "lambda,n_seeds,mean_weight_mso,mean_activation_mso,ratio\n";
  for (const auto& r : bundle.gap_table)
    out << format_double(r.lambda) << ',' << r.n_seeds << ',' << format_double(r.mean_weight_mso) << ','
        << format_double(r.mean_activation_mso) << ',' << format_double(r.ratio) << '\n';
  return out.str();
}

std::string layer_gap_csv(const AnalysisBundle& bundle) {
  std::ostringstream out;
  out << "lambda,layer,weight_mso,activation_mso,ratio\n";
  for (const auto& r : bundle.gap_table)
    for (std::size_t l = 0; l < r.per_layer_ratio.size(); ++l)
      out << format_double(r.lambda) << ',' << l << ',' << format_double(r.per_layer_weight_mso[l]) << ','
          << format_double(r.per_layer_activation_mso[l]) << ',' << format_double(r.per_layer_ratio[l]) << '\n';
  return out.str();
}

std::string gap_plot_data(const AnalysisBundle& bundle) {
  std::ostringstream out;
  out << "# lambda mean_weight_mso mean_activation_mso\n";
  for (const auto& r : bundle.gap_table)
    out << format_double(r.lambda) << ' ' << format_double(r.mean_weight_mso) << ' '
        << format_double(r.mean_activation_mso) << '\n';
  return out.str();
}

void to_json(Json& j, const AnalysisBundle& b) {
  Json rows = Json::array();
  for (const auto& r : b.gap_table)
    rows.push_back(Json{{"lambda", r.lambda},
                        {"n_seeds", r.n_seeds},
                        {"mean_weight_mso", r.mean_weight_mso},
                        {"mean_activation_mso", r.mean_activation_mso},
                        {"ratio", finite_or_null(r.ratio)},
                        {"per_layer_weight_mso", r.per_layer_weight_mso},
                        {"per_layer_activation_mso", r.per_layer_activation_mso}});
  j["gap_table"] = rows;
  if (b.correlation) {
    const auto& c = *b.correlation;
    Json cj{{"r", c.r}, {"n", c.n}, {"t", finite_or_null(c.t_statistic)}, {"p_two_sided", c.p_two_sided}};
    cj["ci95"] = c.ci95 ? Json::array({c.ci95->low, c.ci95->high}) : Json(nullptr);
    j["correlation"] = cj;
  } else {
    j["correlation"] = nullptr;
  }
  j["correlation_note"] = b.correlation_note;
  if (b.comparison) {
    const auto& c = *b.comparison;
    j["comparison"] = Json{{"baseline_lambda", c.baseline_lambda},
                           {"treatment_lambda", c.treatment_lambda},
                           {"seeds", c.seeds},
                           {"baseline_val_loss", summary_json(c.baseline_val_loss)},
                           {"treatment_val_loss", summary_json(c.treatment_val_loss)},
                           {"baseline_perplexity", summary_json(c.baseline_perplexity)},
                           {"treatment_perplexity", summary_json(c.treatment_perplexity)},
                           {"delta_percent", c.delta_percent},
                           {"paired_t",
                            {{"n", c.test.n},
                             {"mean_diff", c.test.mean_diff},
                             {"sd_diff", c.test.sd_diff},
                             {"t", finite_or_null(c.test.t_statistic)},
                             {"df", c.test.degrees_freedom},
                             {"p_two_sided", c.test.p_two_sided},
                             {"saturated", c.test.saturated}}}};
  } else {
    j["comparison"] = nullptr;
  }
  j["comparison_note"] = b.comparison_note;
}

std::string describe(const AnalysisBundle& b) {
  std::ostringstream out;
  char line[256];
  out << "lambda        weight_mso    activation_mso  ratio     seeds\n";
  for (const auto& r : b.gap_table) {
    std::snprintf(line, sizeof line, "%-12g  %-12.4e  %-14.4f  %-8.1f  %zu\n", r.lambda, r.mean_weight_mso,
                  r.mean_activation_mso, r.ratio, r.n_seeds);
    out << line;
  }
  if (b.correlation) {
    std::snprintf(line, sizeof line, "pearson(weight, activation) r = %.3f, p = %.3f, n = %zu", b.correlation->r,
                  b.correlation->p_two_sided, b.correlation->n);
    out << line;
    if (b.correlation->ci95) {
      std::snprintf(line, sizeof line, ", 95%% CI [%.3f, %.3f]", b.correlation->ci95->low, b.correlation->ci95->high);
      out << line;
    }
    out << '\n';
  } else if (!b.correlation_note.empty()) {
    out << b.correlation_note << '\n';
  }
  if (b.comparison) {
    const auto& c = *b.comparison;
    auto sd = [](const stats::Summary& s) { return s.sample_std.value_or(0.0); };
    std::snprintf(line, sizeof line,
                  "val loss lambda=%g: %.4f +/- %.4f  lambda=%g: %.4f +/- %.4f  delta %+.2f%%  paired t p = %.3f\n",
                  c.baseline_lambda, c.baseline_val_loss.mean, sd(c.baseline_val_loss), c.treatment_lambda,
                  c.treatment_val_loss.mean, sd(c.treatment_val_loss), c.delta_percent, c.test.p_two_sided);
    out << line;
  }
  if (!b.comparison_note.empty()) out << b.comparison_note << '\n';
  return out.str();
}

void write_analysis(const AnalysisBundle& bundle, const fs::path& dir_in) {
  const fs::path dir = resolve_output_dir(dir_in);
  fs::create_directories(dir);
  const Json j = bundle;
  write_text(dir / "gap_table.csv", gap_table_csv(bundle));
  write_text(dir / "layer_gap.csv", layer_gap_csv(bundle));
  write_text(dir / "gap_plot.dat", gap_plot_data(bundle));
  write_text(dir / "correlation.json",
             Json{{"correlation", j["correlation"]}, {"note", j["correlation_note"]}}.dump(2) + "\n");
  write_text(dir / "comparison.json",
             Json{{"comparison", j["comparison"]}, {"note", j["comparison_note"]}}.dump(2) + "\n");
  write_text(dir / "analysis.json", j.dump(2) + "\n");
}

GapDemo run_gap_demo(std::size_t d_model, std::size_t d_ffn, std::size_t trials, std::uint64_t seed,
                     const std::optional<fs::path>& output_dir) {
  GapDemo demo;
  demo.report = gap_oracle(d_model, d_ffn, trials, seed);
  demo.summary = describe(demo.report);
  demo.json = demo.report;
  if (output_dir) {
    const fs::path dir = resolve_output_dir(*output_dir);
    fs::create_directories(dir);
    write_text(dir / "gap_demo.json", demo.json.dump(2) + "\n");
  }
  return demo;
}

}  // namespace moelab
