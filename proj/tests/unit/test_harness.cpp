// SPDX-License-Identifier: Apache-2.0
#include <doctest.h>

#include <cmath>
#include <cstdlib>
#include <filesystem>
#include <fstream>
#include <sstream>

#include "moelab/errors.hpp"
#include "moelab/harness.hpp"

using namespace moelab;
namespace fs = std::filesystem;

namespace {
std::string slurp(const fs::path& p) {
  std::ifstream f(p, std::ios::binary);
  std::stringstream ss;
  ss << f.rdbuf();
  return ss.str();
}

fs::path scratch(const std::string& name) {
  const fs::path p = fs::temp_directory_path() / ("moelab_harness_" + name);
  fs::remove_all(p);
  fs::create_directories(p);
  return p;
}

ExperimentPlan tiny_plan(const fs::path& root) {
  const fs::path corpus = root / "corpus.txt";
  {
    std::ifstream in(fs::path(MOELAB_SOURCE_DIR) / "data" / "tiny_tales.txt", std::ios::binary);
    std::string text(20000, '\0');
    in.read(text.data(), static_cast<std::streamsize>(text.size()));
    std::ofstream(corpus, std::ios::binary) << text;
  }
  ExperimentPlan p;
  p.lambda_grid = {0.0, 0.001, 0.1};
  p.seeds = {42, 123};
  p.model.d_model = 16;
  p.model.n_heads = 2;
  p.model.n_experts = 3;
  p.model.d_ffn = 32;
  p.model.context_length = 16;
  p.train.iterations = 3;
  p.train.batch_size = 2;
  p.train.seq_len = 16;
  p.train.eval_interval = 3;
  p.train.eval_tokens = 128;
  p.corpus_path = corpus;
  p.output_dir = root / "sweep";
  return p;
}

MetricsRecord record(double w, double a, double val) {
  MetricsRecord r;
  r.step = 2000;
  r.val_loss = val;
  r.overlap.mean_weight_mso = w;
  r.overlap.mean_activation_mso = a;
  r.overlap.per_layer_weight_mso = {w, w};
  r.overlap.per_layer_activation_mso = {a, a};
  r.overlap.gap_ratio = a / w;
  return r;
}

SweepResult synthetic(const std::vector<double>& lambdas, const std::vector<double>& w, const std::vector<double>& a,
                      const std::vector<std::uint64_t>& seeds) {
  SweepResult r;
  r.plan.lambda_grid = lambdas;
  r.plan.seeds = seeds;
  for (std::size_t i = 0; i < lambdas.size(); ++i)
    for (std::size_t s = 0; s < seeds.size(); ++s) {
      CellResult c;
      c.lambda = lambdas[i];
      c.seed = seeds[s];
      c.ok = true;
      c.final = record(w[i], a[i], 6.0 + 0.01 * static_cast<double>(i) + 0.003 * static_cast<double>(s * s));
      r.cells.push_back(c);
    }
  return r;
}
}  // namespace

TEST_CASE("number formatting and cell names") {
  CHECK(format_double(0.001) == "0.001");
  CHECK(format_double(0.1) == "0.10000000000000001");
  CHECK(std::stod(format_double(0.1)) == 0.1);
  CHECK(format_double(1.0 / 3.0) == "0.33333333333333331");
  CHECK(format_double(NAN) == "nan");
  CHECK(cell_directory(0.005, 42) == "lambda_0.005_seed_42");
  CHECK(cell_directory(0.0, 1337) == "lambda_0_seed_1337");
}

TEST_CASE("default plan") {
  ExperimentPlan p;
  CHECK(p.lambda_grid == std::vector<double>{0.0, 0.001, 0.005, 0.01, 0.05, 0.1, 0.2});
  CHECK(p.seeds == std::vector<std::uint64_t>{42, 123, 456, 789, 1337});
  p.corpus_path = "x";
  CHECK_NOTHROW(p.validate());
  p.lambda_grid = {0.0, 0.1, 0.1};
  CHECK_THROWS_AS(p.validate(), ConfigError);
  p.lambda_grid = {-0.1};
  CHECK_THROWS_AS(p.validate(), ConfigError);
  p = ExperimentPlan{};
  p.seeds = {1, 1};
  CHECK_THROWS_AS(p.validate(), ConfigError);
  p = ExperimentPlan{};
  p.workers = 0;
  CHECK_THROWS_AS(p.validate(), ConfigError);
}

TEST_CASE("output root override") {
  ::setenv(kOutputRootEnv, "/tmp/moelab_root", 1);
  CHECK(resolve_output_dir("runs/a") == fs::path("/tmp/moelab_root/runs/a"));
  CHECK(resolve_output_dir("/abs/b") == fs::path("/abs/b"));
  ::unsetenv(kOutputRootEnv);
  CHECK(resolve_output_dir("runs/a") == fs::path("runs/a"));
}

TEST_CASE("sweep: grid coverage, replay, resume, failures") {
  const fs::path root = scratch("sweep");
  ExperimentPlan plan = tiny_plan(root);
  std::vector<std::pair<double, std::uint64_t>> order;
  SweepOptions so;
  so.on_cell = [&](const CellResult& c) { order.emplace_back(c.lambda, c.seed); };
  const SweepResult first = run_sweep(plan, so);
  REQUIRE(first.cells.size() == 6);
  CHECK(first.trained() == 6);
  CHECK(first.failures().empty());
  CHECK(order.front() == std::pair<double, std::uint64_t>{0.0, 42});
  for (std::size_t i = 0; i < 6; ++i) {
    CHECK(first.cells[i].lambda == plan.lambda_grid[i / 2]);
    CHECK(first.cells[i].seed == plan.seeds[i % 2]);
    CHECK(fs::exists(plan.output_dir / first.cells[i].directory / "run.json"));
    CHECK(fs::exists(plan.output_dir / first.cells[i].directory / "checkpoint.bin"));
  }

  const std::string csv = slurp(plan.output_dir / "sweep.csv");
  CHECK(csv == sweep_csv(first));
  std::istringstream lines(csv);
  std::string line;
  std::getline(lines, line);
  CHECK(line == kSweepCsvSchema);
  std::getline(lines, line);
  CHECK(line.rfind("lambda,seed,step,", 0) == 0);
  std::size_t rows = 0;
  while (std::getline(lines, line)) ++rows;
  CHECK(rows == 6);

  // replay into a fresh directory with two workers: byte-identical table
  ExperimentPlan replay = plan;
  replay.output_dir = root / "replay";
  replay.workers = 2;
  const SweepResult second = run_sweep(replay);
  CHECK(second.trained() == 6);
  CHECK(slurp(replay.output_dir / "sweep.csv") == csv);

  // resume: nothing retrained, same table
  const auto stamp = fs::last_write_time(plan.output_dir / first.cells[0].directory / "checkpoint.bin");
  const SweepResult resumed = run_sweep(plan);
  CHECK(resumed.trained() == 0);
  CHECK(resumed.reused() == 6);
  CHECK(slurp(plan.output_dir / "sweep.csv") == csv);
  CHECK(fs::last_write_time(plan.output_dir / first.cells[0].directory / "checkpoint.bin") == stamp);

  // an interrupted cell (status still "running") is recomputed
  const fs::path run_json = plan.output_dir / first.cells[3].directory / "run.json";
  Json meta = Json::parse(std::ifstream(run_json));
  meta["status"] = "running";
  std::ofstream(run_json) << meta.dump();
  const SweepResult partial = run_sweep(plan);
  CHECK(partial.trained() == 1);
  CHECK(partial.reused() == 5);
  CHECK(slurp(plan.output_dir / "sweep.csv") == csv);

  // the summary reloads into the same table
  CHECK(sweep_csv(load_sweep(plan.output_dir)) == csv);

  // a failing cell is reported separately and the sweep carries on
  ExperimentPlan failing = plan;
  failing.output_dir = root / "failing";
  failing.lambda_grid = {0.0, 0.5};
  failing.seeds = {42};
  fs::create_directories(failing.output_dir / "cells");
  std::ofstream(failing.output_dir / "cells" / cell_directory(0.5, 42)) << "not a directory";
  const SweepResult f = run_sweep(failing);
  REQUIRE(f.failures().size() == 1);
  CHECK(f.failures()[0]->lambda == 0.5);
  CHECK_FALSE(f.failures()[0]->error.empty());
  CHECK(f.cells[0].ok);
  const std::string fcsv = slurp(failing.output_dir / "sweep.csv");
  CHECK(std::count(fcsv.begin(), fcsv.end(), '\n') == 3);  // schema, header, one row
  const Json summary = Json::parse(std::ifstream(failing.output_dir / "sweep.json"));
  CHECK(summary["failures"].size() == 1);
  fs::remove_all(root);
}

TEST_CASE("analysis of the five-point gap fixture reproduces the ratio column") {
  const std::vector<double> lambdas = {0.0, 0.001, 0.01, 0.1, 0.2};
  const std::vector<double> w = {5.43e-4, 7.52e-4, 1.16e-3, 2.04e-3, 2.78e-3};
  const std::vector<double> a = {0.572, 0.581, 0.577, 0.593, 0.564};
  const AnalysisBundle b = analyze_sweep(synthetic(lambdas, w, a, {42, 123, 456}));
  REQUIRE(b.gap_table.size() == 5);
  const double expected[] = {1053, 773, 497, 291, 203};  // a / w rounded
  for (std::size_t i = 0; i < 5; ++i) {
    CHECK(b.gap_table[i].ratio == doctest::Approx(a[i] / w[i]).epsilon(1e-15));
    CHECK(std::round(b.gap_table[i].ratio) == expected[i]);
    CHECK(b.gap_table[i].n_seeds == 3);
  }
  REQUIRE(b.correlation);
  CHECK(b.correlation->r == doctest::Approx(-0.1513609520679317).epsilon(1e-10));
  REQUIRE(b.comparison);
  CHECK(b.comparison->seeds == std::vector<std::uint64_t>{42, 123, 456});
  CHECK(b.comparison->delta_percent == doctest::Approx(0.01 / 6.005 * 100.0).epsilon(1e-6));
  CHECK(b.comparison->test.saturated);  // every seed shifted by exactly 0.01
  CHECK(gap_table_csv(b).rfind("lambda,n_seeds,mean_weight_mso,mean_activation_mso,ratio\n", 0) == 0);
  CHECK(describe(b).find("pearson") != std::string::npos);
}

TEST_CASE("analysis scope rules") {
  const std::vector<std::uint64_t> seeds = {1, 2};
  SUBCASE("fewer than three lambda values") {
    const auto r = synthetic({0.0, 0.001}, {1e-3, 2e-3}, {0.5, 0.6}, seeds);
    CHECK_THROWS_AS(analyze_sweep(r), AnalysisScopeError);
    AnalysisOptions partial;
    partial.require_complete = false;
    const AnalysisBundle b = analyze_sweep(r, partial);
    CHECK(b.gap_table.size() == 2);
    CHECK_FALSE(b.correlation);
    CHECK(b.comparison);
    CHECK(b.correlation_note.find("at least 3") != std::string::npos);
  }
  SUBCASE("one seed") {
    const auto r = synthetic({0.0, 0.001, 0.01}, {1e-3, 2e-3, 3e-3}, {0.5, 0.6, 0.4}, {7});
    CHECK_THROWS_AS(analyze_sweep(r), AnalysisScopeError);
  }
  SUBCASE("constant series is reported, not an error") {
    const auto r = synthetic({0.0, 0.001, 0.01}, {1e-3, 2e-3, 3e-3}, {0.5, 0.5, 0.5}, seeds);
    const AnalysisBundle b = analyze_sweep(r);
    CHECK_FALSE(b.correlation);
    CHECK(b.correlation_note.find("no correlation computable") != std::string::npos);
  }
  SUBCASE("nothing to analyze") {
    SweepResult empty;
    CHECK_THROWS_AS(analyze_sweep(empty), AnalysisScopeError);
  }
  SUBCASE("comparison pairs by seed") {
    auto r = synthetic({0.0, 0.001, 0.01}, {1e-3, 2e-3, 3e-3}, {0.5, 0.6, 0.4}, {1, 2, 3});
    r.cells[4].ok = false;  // λ = 0.001, seed 2 failed
    r.cells[4].final.reset();
    r.cells[3].final->val_loss = 6.5;
    const AnalysisBundle b = analyze_sweep(r);
    REQUIRE(b.comparison);
    CHECK(b.comparison->seeds == std::vector<std::uint64_t>{1, 3});
    CHECK(b.comparison->test.n == 2);
  }
}

TEST_CASE("analysis files") {
  const fs::path dir = scratch("analysis");
  const auto r = synthetic({0.0, 0.001, 0.01}, {1e-3, 2e-3, 3e-3}, {0.5, 0.62, 0.4}, {1, 2, 3});
  const AnalysisBundle b = analyze_sweep(r);
  write_analysis(b, dir);
  for (const char* f : {"gap_table.csv", "layer_gap.csv", "gap_plot.dat", "correlation.json", "comparison.json",
                        "analysis.json"})
    CHECK(fs::exists(dir / f));
  const Json j = Json::parse(std::ifstream(dir / "analysis.json"));
  CHECK(j["gap_table"].size() == 3);
  CHECK(j["comparison"]["seeds"].size() == 3);
  CHECK(slurp(dir / "layer_gap.csv").find("0,1,0.001,0.5,500") != std::string::npos);
  fs::remove_all(dir);
}

TEST_CASE("gap demo rendering") {
  const fs::path dir = scratch("gap");
  const GapDemo d = run_gap_demo(16, 16, 2000, 1, dir);
  CHECK(d.report.gap_demonstrated);
  CHECK(fs::exists(dir / "gap_demo.json"));
  CHECK(d.json["arms"].size() == 3);
  fs::remove_all(dir);
}
