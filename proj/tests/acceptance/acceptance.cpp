// SPDX-License-Identifier: Apache-2.0
// Acceptance suite: one PASS/FAIL line per criterion, exit status 1 if any fail.
//
//   moelab_acceptance [--only 1,5,9] [--work-dir DIR]
//
// MOELAB_ACCEPTANCE_FULL_SWEEP=1 runs criterion 8 at the full training length.
#include <CLI11.hpp>

#include <chrono>
#include <cmath>
#include <cstdio>
#include <cstdlib>
#include <cstring>
#include <fstream>
#include <functional>
#include <set>
#include <sstream>

#include "moelab/checkpoint.hpp"
#include "moelab/errors.hpp"
#include "moelab/gap_oracle.hpp"
#include "moelab/harness.hpp"
#include "moelab/overlap.hpp"
#include "moelab/stats.hpp"
#include "moelab/trainer.hpp"

using namespace moelab;
namespace fs = std::filesystem;

namespace {

struct Outcome {
  bool pass = false;
  std::string detail;
};

struct Context {
  fs::path work;
  fs::path corpus_path = fs::path(MOELAB_SOURCE_DIR) / "data" / "tiny_tales.txt";
  std::optional<TrainingRun> default_run;  // shared by criteria 6, 7 and 9
  double default_seconds = 0.0;
};

std::string fmt(const char* f, auto... args) {
  char buf[512];
  std::snprintf(buf, sizeof buf, f, args...);
  return buf;
}

std::string slurp(const fs::path& p) {
  std::ifstream f(p, std::ios::binary);
  std::stringstream ss;
  ss << f.rdbuf();
  return ss.str();
}

Tensor unit_matrix(std::size_t rows, std::size_t cols, std::size_t r, std::size_t c, double v = 1.0) {
  Tensor t({rows, cols});
  t.at(r, c) = v;
  return t;
}

RoutingTrace two_slot_trace(const std::vector<std::array<double, 4>>& tokens) {
  RoutingTrace tr;
  tr.k = 2;
  tr.d_model = 2;
  tr.tokens = tokens.size();
  for (const auto& t : tokens) {
    tr.experts.insert(tr.experts.end(), {0, 1});
    tr.gates.insert(tr.gates.end(), {0.5, 0.5});
    tr.outputs.insert(tr.outputs.end(), t.begin(), t.end());
  }
  return tr;
}

// 1. Metric identities.
Outcome metric_identities(Context&) {
  const double tol = 1e-10;
  double worst = 0.0;
  auto check = [&](double got, double want) { worst = std::max(worst, std::abs(got - want)); };

  // orthonormalized experts: flattened unit matrices at distinct positions
  const Tensor o0 = unit_matrix(4, 3, 0, 0), o1 = unit_matrix(4, 3, 1, 2), o2 = unit_matrix(4, 3, 3, 1);
  check(weight_mso({{&o0, &o1, &o2}}).mean, 0.0);
  // duplicated experts
  const Tensor r0 = Tensor::matrix({{0.3, -1.2, 0.7}, {2.0, 0.1, -0.4}});
  const Tensor r1 = r0;
  check(weight_mso({{&r0, &r1}}).mean, 1.0);
  // 45°: W₂ = (E₀₀ + E₁₁)/√2 against W₁ = E₀₀
  Tensor d45({4, 3});
  d45.at(0, 0) = d45.at(1, 1) = 1.0 / std::sqrt(2.0);
  check(weight_mso({{&o0, &d45}}).mean, 0.5);

  const RoutingTrace orth = two_slot_trace({{1, 0, 0, 2}, {0, -3, 4, 0}});
  const RoutingTrace dup = two_slot_trace({{1, 2, 1, 2}, {-5, 1, -5, 1}});
  const RoutingTrace half = two_slot_trace({{1, 0, 1, 1}, {0, 2, -3, 3}});
  check(activation_mso(std::span(&orth, 1)).mean, 0.0);
  check(activation_mso(std::span(&dup, 1)).mean, 1.0);
  check(activation_mso(std::span(&half, 1)).mean, 0.5);
  return {worst <= tol, fmt("max deviation %.2e over 6 identities (tol 1e-10)", worst)};
}

// 2. Gradient fidelity of lm_loss + λ·L_orth with respect to every W_up.
Outcome gradient_fidelity(Context&) {
  MoEModelConfig mc;
  mc.vocab_size = 16;
  mc.d_model = 8;
  mc.n_layers = 2;
  mc.n_heads = 2;
  mc.n_experts = 2;
  mc.top_k = 2;
  mc.d_ffn = 16;
  mc.context_length = 8;
  mc.seed = 3;
  MoEModel model(mc);
  // larger weights than the default init so both terms carry real curvature
  Rng rng(11);
  for (auto& p : model.parameters())
    if (p.decay)
      for (double& v : p.tensor->data()) v = rng.normal(0.0, 0.3);
  const double lambda = 0.5;
  std::vector<int> tokens(2 * 8 + 1);
  for (int& t : tokens) t = static_cast<int>(rng.uniform_int(0, 15));
  const std::vector<int> inputs(tokens.begin(), tokens.end() - 1), targets(tokens.begin() + 1, tokens.end());
  auto loss = [&](Tape& tape) {
    Var lm = ops::cross_entropy(forward(tape, model, inputs, 2, 8, false).logits, targets);
    return ops::add(lm, ops::scale(orthogonality_loss(tape, model), lambda));
  };
  model.zero_grad();
  {
    Tape tape;
    tape.backward(loss(tape));
  }
  const double h = 1e-5;
  double worst_tensor = 0.0, worst_element = 0.0;
  std::size_t checked = 0;
  for (Block& b : model.blocks)
    for (Expert& e : b.moe.experts) {
      Tensor& w = e.w_up;
      const std::vector<double> analytic(w.grad().begin(), w.grad().end());
      double diff2 = 0.0, num2 = 0.0;
      for (std::size_t i = 0; i < w.numel(); ++i) {
        const double x0 = w[i];
        w[i] = x0 + h;
        Tape tp(false);
        const double fp = loss(tp).item();
        w[i] = x0 - h;
        Tape tm(false);
        const double fm = loss(tm).item();
        w[i] = x0;
        const double numeric = (fp - fm) / (2 * h);
        diff2 += (analytic[i] - numeric) * (analytic[i] - numeric);
        num2 += numeric * numeric;
        const double scale = std::max({std::abs(analytic[i]), std::abs(numeric), 1e-6});
        worst_element = std::max(worst_element, std::abs(analytic[i] - numeric) / scale);
        ++checked;
      }
      worst_tensor = std::max(worst_tensor, std::sqrt(diff2 / num2));
    }
  return {worst_tensor < 1e-4 && worst_element < 1e-4,
          fmt("%zu W_up entries; max relative error per tensor %.2e, per entry %.2e (tol 1e-4)", checked,
              worst_tensor, worst_element)};
}

// 3. Gap oracle at d = 32 over 10,000 inputs.
Outcome gap_oracle_check(Context&) {
  const GapOracleReport r = gap_oracle(32, 32, 10000, 0);
  const GapArm& tz = r.arm("trace_zero");
  const GapArm& an = r.arm("annihilating");
  const bool ok = std::abs(tz.trace_w1t_w2) <= 1e-12 && tz.mean_sq_cosine > 0.01 && an.mean_sq_cosine <= 1e-12 &&
                  std::abs(an.trace_w1t_w2) <= 1e-12;
  return {ok, fmt("tr(W1'W2) = %.1e, mean cos^2 = %.4f (> 0.01); annihilating control mean cos^2 = %.1e",
                  tz.trace_w1t_w2, tz.mean_sq_cosine, an.mean_sq_cosine)};
}

// 4. Statistics against independent oracles.
Outcome stats_oracles(Context&) {
  std::vector<std::string> failures;
  // Pearson: extended-precision textbook formula on the five published pairs
  const std::vector<double> w = {5.43e-4, 7.52e-4, 1.16e-3, 2.04e-3, 2.78e-3};
  const std::vector<double> a = {0.572, 0.581, 0.577, 0.593, 0.564};
  long double mx = 0, my = 0;
  for (std::size_t i = 0; i < 5; ++i) {
    mx += w[i] / 5.0L;
    my += a[i] / 5.0L;
  }
  long double sxy = 0, sxx = 0, syy = 0;
  for (std::size_t i = 0; i < 5; ++i) {
    sxy += (w[i] - mx) * (a[i] - my);
    sxx += (w[i] - mx) * (w[i] - mx);
    syy += (a[i] - my) * (a[i] - my);
  }
  const double r_oracle = static_cast<double>(sxy / std::sqrt(sxx * syy));
  const double r = stats::pearson(w, a).r;
  if (std::abs(r - r_oracle) > 1e-10) failures.push_back(fmt("pearson %.12f vs %.12f", r, r_oracle));

  const auto ci = stats::fisher_ci(-0.293, 7);
  if (std::abs(ci.low - -0.857) > 0.01 || std::abs(ci.high - 0.590) > 0.01)
    failures.push_back(fmt("Fisher CI [%.3f, %.3f]", ci.low, ci.high));

  // 40-digit reference values of the t CDF
  const double fixtures[][3] = {{2.0, 5, 0.94903026058507082188},   {-1.5, 3, 0.11529193262241152614},
                                {3.2, 10, 0.99525415210234807625},  {-0.3, 30, 0.38312305264217640883},
                                {10.0, 2, 0.99507377148833715458},  {-4.0, 7, 0.0025949566746484058115},
                                {1.96, 1000, 0.97486340752212564078}, {-8.0, 12, 1.8799491123751286415e-6}};
  double worst_t = 0.0;
  for (const auto& f : fixtures) worst_t = std::max(worst_t, std::abs(stats::student_t_cdf(f[0], f[1]) - f[2]));
  if (worst_t > 1e-9) failures.push_back(fmt("t CDF deviation %.2e", worst_t));

  // hand-computed: differences (−0.5, 0.5, −0.5, 1), mean 1/8, sd 3/4, t = 1/3
  const std::vector<double> pa = {1, 2, 3, 4}, pb = {1.5, 1.5, 3.5, 3};
  const auto pt = stats::paired_t_test(pa, pb);
  if (std::abs(pt.t_statistic - 1.0 / 3.0) > 1e-10 || std::abs(pt.mean_diff - 0.125) > 1e-10 ||
      std::abs(pt.sd_diff - 0.75) > 1e-10)
    failures.push_back(fmt("paired t %.12f", pt.t_statistic));

  std::string detail = fmt("pearson |dr| = %.1e, Fisher CI [%.3f, %.3f], t CDF max dev %.1e, paired t = %.10f",
                           std::abs(r - r_oracle), ci.low, ci.high, worst_t, pt.t_statistic);
  for (const auto& f : failures) detail += "; mismatch: " + f;
  return {failures.empty(), detail};
}

// 5. Ratio column from the published weight/activation MSO values.
Outcome ratio_column(Context&) {
  const std::vector<double> lambdas = {0.0, 0.001, 0.01, 0.1, 0.2};
  const std::vector<double> w = {5.43e-4, 7.52e-4, 1.16e-3, 2.04e-3, 2.78e-3};
  const std::vector<double> a = {0.572, 0.581, 0.577, 0.593, 0.564};
  const std::vector<int> published = {1053, 773, 496, 290, 203};
  SweepResult sweep;
  for (std::size_t i = 0; i < 5; ++i) {
    CellResult c;
    c.lambda = lambdas[i];
    c.seed = 42;
    c.ok = true;
    MetricsRecord rec;
    rec.overlap.mean_weight_mso = w[i];
    rec.overlap.mean_activation_mso = a[i];
    rec.overlap.per_layer_weight_mso = {w[i]};
    rec.overlap.per_layer_activation_mso = {a[i]};
    c.final = rec;
    sweep.cells.push_back(c);
  }
  AnalysisOptions opt;
  opt.require_complete = false;  // one seed per λ: the gap table is the only output needed here
  const AnalysisBundle b = analyze_sweep(sweep, opt);
  bool ok = b.gap_table.size() == 5;
  std::string detail;
  for (std::size_t i = 0; ok && i < 5; ++i) {
    const double ratio = b.gap_table[i].ratio;
    // inputs carry three significant figures: half a unit in the last place
    const double dw = 0.005 * std::pow(10.0, std::floor(std::log10(w[i])));
    const double lo = (a[i] - 0.0005) / (w[i] + dw), hi = (a[i] + 0.0005) / (w[i] - dw);
    const long rounded = std::lround(ratio);
    const bool row_ok = std::abs(rounded - published[i]) <= 1 && published[i] >= lo && published[i] <= hi;
    ok = ok && row_ok;
    detail += fmt("%s%ld(%d)", i ? " " : "", rounded, published[i]);
  }
  return {ok, "computed(published): " + detail + "; each within one unit and inside the input-rounding interval"};
}

const TrainingRun& default_run(Context& ctx) {
  if (!ctx.default_run) {
    const Corpus corpus = load_corpus(ctx.corpus_path, 0.1);
    RunOptions ro;
    ro.output_dir = ctx.work / "default_lambda0";
    fs::remove_all(*ro.output_dir);
    ctx.default_run = run_training(MoEModelConfig::desk(), TrainConfig{}, corpus, ro);
    ctx.default_seconds = ctx.default_run->wall_seconds;
  }
  return *ctx.default_run;
}

// 6. Gap at desk scale after the default λ = 0 run.
Outcome desk_gap(Context& ctx) {
  const MetricsRecord& last = default_run(ctx).records.back();
  const double ratio = last.overlap.mean_activation_mso / last.overlap.mean_weight_mso;
  return {ratio > 10.0, fmt("step %zu: activation MSO %.4f / weight MSO %.3e = %.1fx (> 10x); run took %.0f s",
                            last.step, last.overlap.mean_activation_mso, last.overlap.mean_weight_mso, ratio,
                            ctx.default_seconds)};
}

// 7. Training sanity on the bundled corpus.
Outcome training_sanity(Context& ctx) {
  const auto& recs = default_run(ctx).records;
  const double first = recs.front().val_loss, last = recs.back().val_loss, ln256 = std::log(256.0);
  const bool ok = std::abs(first - ln256) <= 0.02 * ln256 && last < 0.9 * first;
  return {ok, fmt("initial val loss %.4f (ln 256 = %.4f, %+.2f%%), final %.4f = %.3f x initial (< 0.9)", first, ln256,
                  100.0 * (first - ln256) / ln256, last, last / first)};
}

// 8. Sweep protocol: full grid, one row per cell, byte-identical replay, resume.
Outcome protocol_fidelity(Context& ctx) {
  const bool full = [] {
    const char* v = std::getenv("MOELAB_ACCEPTANCE_FULL_SWEEP");
    return v && std::string(v) == "1";
  }();
  ExperimentPlan plan;
  plan.corpus_path = ctx.corpus_path;
  if (!full) {
    plan.train.iterations = 10;
    plan.train.eval_interval = 10;
    plan.train.eval_tokens = 1024;
  }
  plan.output_dir = ctx.work / "sweep_a";
  fs::remove_all(plan.output_dir);
  const SweepResult a = run_sweep(plan);

  std::set<std::pair<double, std::uint64_t>> cells, expected;
  for (const auto& c : a.cells) cells.emplace(c.lambda, c.seed);
  for (double l : kDefaultLambdaGrid)
    for (auto s : kDefaultSeeds) expected.emplace(l, s);
  const std::string csv = slurp(plan.output_dir / "sweep.csv");
  const auto rows = static_cast<std::size_t>(std::count(csv.begin(), csv.end(), '\n')) - 2;
  const bool grid_ok = cells == expected && a.cells.size() == 35 && a.failures().empty() && rows == 35;

  ExperimentPlan replay = plan;
  replay.output_dir = ctx.work / "sweep_b";
  fs::remove_all(replay.output_dir);
  run_sweep(replay);
  const bool replay_ok = slurp(replay.output_dir / "sweep.csv") == csv;

  const auto t0 = std::chrono::steady_clock::now();
  const SweepResult again = run_sweep(plan);
  const double resume_s = std::chrono::duration<double>(std::chrono::steady_clock::now() - t0).count();
  const bool resume_ok = again.trained() == 0 && again.reused() == 35 && slurp(plan.output_dir / "sweep.csv") == csv;

  return {grid_ok && replay_ok && resume_ok,
          fmt("%zu cells (7 lambda x 5 seeds), %zu CSV rows, replay %s, resume retrained %zu in %.2f s%s", cells.size(),
              rows, replay_ok ? "byte-identical" : "DIFFERS", again.trained(), resume_s,
              full ? "" : "; reduced to 10 iterations per cell (MOELAB_ACCEPTANCE_FULL_SWEEP=1 for full length)")};
}

// 9. λ = 0 is bitwise identical to never constructing the term.
Outcome lambda_zero_equivalence(Context& ctx) {
  const TrainingRun& with = default_run(ctx);
  TrainConfig tc;
  tc.build_orth_term = false;
  const Corpus corpus = load_corpus(ctx.corpus_path, 0.1);
  RunOptions ro;
  ro.output_dir = ctx.work / "default_no_orth_term";
  fs::remove_all(*ro.output_dir);
  TrainingRun without = run_training(MoEModelConfig::desk(), tc, corpus, ro);
  MoEModel& m1 = const_cast<MoEModel&>(with.model);
  const bool params_equal = serialize_checkpoint(m1) == serialize_checkpoint(without.model);
  const bool records_equal = Json(with.records).dump() == Json(without.records).dump();
  return {params_equal && records_equal,
          fmt("%zu steps: checkpoint bytes %s, %zu metrics records %s", tc.iterations,
              params_equal ? "identical" : "DIFFER", without.records.size(), records_equal ? "identical" : "DIFFER")};
}

struct Criterion {
  int id;
  const char* name;
  double budget_seconds;  // 0 = no fixed budget
  std::function<Outcome(Context&)> run;
};

}  // namespace

int main(int argc, char** argv) {
  CLI::App app{"acceptance criteria"};
  std::vector<int> only;
  std::string work = "acceptance_work";
  app.add_option("--only", only, "criterion numbers to run")->delimiter(',');
  app.add_option("--work-dir", work, "scratch directory for training runs");
  CLI11_PARSE(app, argc, argv);

  Context ctx;
  ctx.work = resolve_output_dir(work);
  fs::create_directories(ctx.work);

  const std::vector<Criterion> criteria = {
      {1, "metric identities", 1.0, metric_identities},
      {2, "gradient fidelity", 30.0, gradient_fidelity},
      {3, "gap oracle", 5.0, gap_oracle_check},
      {4, "statistics oracles", 1.0, stats_oracles},
      {5, "ratio column", 1.0, ratio_column},
      {6, "desk-scale gap", 0.0, desk_gap},
      {7, "training sanity", 0.0, training_sanity},
      {8, "sweep protocol", 0.0, protocol_fidelity},
      {9, "lambda=0 equivalence", 0.0, lambda_zero_equivalence},
  };

  std::ofstream summary(ctx.work / "summary.txt");
  int failed = 0;
  for (const auto& c : criteria) {
    if (!only.empty() && std::find(only.begin(), only.end(), c.id) == only.end()) continue;
    const auto t0 = std::chrono::steady_clock::now();
    Outcome o;
    try {
      o = c.run(ctx);
    } catch (const std::exception& e) {
      o = {false, std::string("exception: ") + e.what()};
    }
    const double secs = std::chrono::duration<double>(std::chrono::steady_clock::now() - t0).count();
    if (c.budget_seconds > 0.0 && secs > c.budget_seconds) {
      o.pass = false;
      o.detail += fmt("; over the %.0f s budget", c.budget_seconds);
    }
    const std::string line =
        fmt("%s [%d] %s (%.2f s): ", o.pass ? "PASS" : "FAIL", c.id, c.name, secs) + o.detail;
    std::printf("%s\n", line.c_str());
    std::fflush(stdout);
    summary << line << '\n' << std::flush;
    failed += !o.pass;
  }
  std::printf("%d criteria failed\n", failed);
  summary << failed << " criteria failed\n";
  return failed == 0 ? 0 : 1;
}
