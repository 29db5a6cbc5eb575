// SPDX-License-Identifier: Apache-2.0
// Command-line front end: train, sweep, analyze, gap-demo, corpus-info.
#include <CLI11.hpp>

#include <cstdio>
#include <iostream>
#include <set>

#include "moelab/data.hpp"
#include "moelab/errors.hpp"
#include "moelab/harness.hpp"
#include "moelab/trainer.hpp"

namespace fs = std::filesystem;
using namespace moelab;

namespace {

struct CommonFlags {
  MoEModelConfig model = MoEModelConfig::desk();
  TrainConfig train;
  std::string corpus = MOELAB_DEFAULT_CORPUS;
  double val_split = 0.1;
  double grad_clip = 0.0;
  std::string schedule = "constant";
  bool no_orth_term = false;
  bool quiet = false;
};

void add_common(CLI::App* app, CommonFlags& f) {
  app->add_option("--corpus", f.corpus, "UTF-8/byte text file")->capture_default_str();
  app->add_option("--val-split", f.val_split, "validation fraction (contiguous tail)")->capture_default_str();
  app->add_option("--vocab-size", f.model.vocab_size)->capture_default_str();
  app->add_option("--d-model", f.model.d_model)->capture_default_str();
  app->add_option("--n-layers", f.model.n_layers)->capture_default_str();
  app->add_option("--n-heads", f.model.n_heads)->capture_default_str();
  app->add_option("--n-experts", f.model.n_experts)->capture_default_str();
  app->add_option("--top-k", f.model.top_k)->capture_default_str();
  app->add_option("--d-ffn", f.model.d_ffn)->capture_default_str();
  app->add_option("--context-length", f.model.context_length)->capture_default_str();
  app->add_flag("--tie-embeddings", f.model.tie_embeddings);
  app->add_option("--lr", f.train.lr)->capture_default_str();
  app->add_option("--beta1", f.train.beta1)->capture_default_str();
  app->add_option("--beta2", f.train.beta2)->capture_default_str();
  app->add_option("--eps", f.train.eps)->capture_default_str();
  app->add_option("--weight-decay", f.train.weight_decay)->capture_default_str();
  app->add_option("--iterations", f.train.iterations)->capture_default_str();
  app->add_option("--batch-size", f.train.batch_size)->capture_default_str();
  app->add_option("--seq-len", f.train.seq_len)->capture_default_str();
  app->add_option("--eval-interval", f.train.eval_interval)->capture_default_str();
  app->add_option("--eval-tokens", f.train.eval_tokens)->capture_default_str();
  app->add_option("--grad-clip", f.grad_clip, "max global gradient norm (0 = off)")->capture_default_str();
  app->add_option("--lr-schedule", f.schedule)->check(CLI::IsMember({"constant", "cosine"}))->capture_default_str();
  app->add_option("--warmup-iters", f.train.warmup_iters)->capture_default_str();
  app->add_option("--min-lr-ratio", f.train.min_lr_ratio)->capture_default_str();
  app->add_flag("--quiet", f.quiet, "suppress progress lines");
}

void finish_common(CommonFlags& f) {
  if (f.grad_clip > 0.0) f.train.grad_clip = f.grad_clip;
  f.train.schedule = f.schedule == "cosine" ? LrSchedule::kCosine : LrSchedule::kConstant;
  f.train.build_orth_term = !f.no_orth_term;
}

void print_record(const MetricsRecord& r) {
  std::printf("step %6zu  val %.4f  orth %.3e  w_mso %.3e  a_mso %.4f  ratio %.1f\n", r.step, r.val_loss, r.orth_loss,
              r.overlap.mean_weight_mso, r.overlap.mean_activation_mso, r.overlap.gap_ratio);
  std::fflush(stdout);
}

std::vector<double> parse_doubles(const std::string& s) {
  std::vector<double> out;
  std::stringstream ss(s);
  for (std::string item; std::getline(ss, item, ',');) out.push_back(std::stod(item));
  return out;
}

std::vector<std::uint64_t> parse_seeds(const std::string& s) {
  std::vector<std::uint64_t> out;
  std::stringstream ss(s);
  for (std::string item; std::getline(ss, item, ',');) out.push_back(std::stoull(item));
  return out;
}

}  // namespace

int main(int argc, char** argv) {
  CLI::App app{"Mixture-of-experts overlap lab"};
  app.set_version_flag("--version", code_version());
  app.require_subcommand(1);

  CommonFlags train_flags;
  std::string train_out = "runs/train";
  auto* train = app.add_subcommand("train", "train one model and write run.json, metrics.jsonl, checkpoint.bin");
  add_common(train, train_flags);
  train->add_option("--lambda", train_flags.train.lambda, "orthogonality loss weight")->capture_default_str();
  train->add_option("--seed", train_flags.train.seed)->capture_default_str();
  train->add_option("--out", train_out, "output directory")->capture_default_str();
  train->add_flag("--no-orth-term", train_flags.no_orth_term, "never build the orthogonality term (lambda must be 0)");

  CommonFlags sweep_flags;
  std::string sweep_out = "runs/sweep";
  std::string lambdas, seeds;
  std::size_t workers = 1;
  auto* sweep = app.add_subcommand("sweep", "run the lambda x seed grid; resumes completed cells");
  add_common(sweep, sweep_flags);
  sweep->add_option("--lambdas", lambdas, "comma-separated grid (default 0,0.001,0.005,0.01,0.05,0.1,0.2)");
  sweep->add_option("--seeds", seeds, "comma-separated seeds (default 42,123,456,789,1337)");
  sweep->add_option("--workers", workers, "parallel cells")->capture_default_str();
  sweep->add_option("--out", sweep_out)->capture_default_str();

  std::string analyze_in, analyze_out;
  AnalysisOptions analysis;
  bool partial = false;
  auto* analyze = app.add_subcommand("analyze", "gap table, correlation and seed-paired comparison of a sweep");
  analyze->add_option("sweep_dir", analyze_in, "sweep output directory")->required();
  analyze->add_option("--out", analyze_out, "output directory (default: <sweep_dir>/analysis)");
  analyze->add_option("--baseline-lambda", analysis.baseline_lambda)->capture_default_str();
  analyze->add_option("--treatment-lambda", analysis.treatment_lambda)->capture_default_str();
  analyze->add_flag("--partial", partial, "emit whatever is computable instead of failing");

  std::size_t gd_model = 32, gd_ffn = 32, gd_trials = 10000;
  std::uint64_t gd_seed = 0;
  std::string gd_out;
  bool gd_json = false;
  auto* gap = app.add_subcommand("gap-demo", "Frobenius-orthogonal weights versus activation overlap");
  gap->add_option("--d-model", gd_model)->capture_default_str();
  gap->add_option("--d-ffn", gd_ffn)->capture_default_str();
  gap->add_option("--trials", gd_trials)->capture_default_str();
  gap->add_option("--seed", gd_seed)->capture_default_str();
  gap->add_option("--out", gd_out, "write gap_demo.json here");
  gap->add_flag("--json", gd_json, "print JSON instead of the text report");

  std::string ci_corpus = MOELAB_DEFAULT_CORPUS;
  double ci_split = 0.1;
  auto* info = app.add_subcommand("corpus-info", "token counts, split sizes and digest of a corpus");
  info->add_option("corpus", ci_corpus)->capture_default_str();
  info->add_option("--val-split", ci_split)->capture_default_str();

  CLI11_PARSE(app, argc, argv);

  try {
    if (*train) {
      finish_common(train_flags);
      const Corpus corpus = load_corpus(train_flags.corpus, train_flags.val_split);
      RunOptions ro;
      ro.output_dir = resolve_output_dir(train_out);
      if (!train_flags.quiet) ro.on_record = print_record;
      const TrainingRun run = run_training(train_flags.model, train_flags.train, corpus, ro);
      std::printf("wrote %s (%.1f s)\n", ro.output_dir->string().c_str(), run.wall_seconds);
    } else if (*sweep) {
      finish_common(sweep_flags);
      ExperimentPlan plan;
      if (!lambdas.empty()) plan.lambda_grid = parse_doubles(lambdas);
      if (!seeds.empty()) plan.seeds = parse_seeds(seeds);
      plan.model = sweep_flags.model;
      plan.train = sweep_flags.train;
      plan.corpus_path = sweep_flags.corpus;
      plan.val_split = sweep_flags.val_split;
      plan.output_dir = sweep_out;
      plan.workers = workers;
      SweepOptions so;
      if (!sweep_flags.quiet)
        so.on_cell = [](const CellResult& c) {
          if (c.ok)
            std::printf("lambda %-8g seed %-5llu %s val %.4f ratio %.1f\n", c.lambda,
                        static_cast<unsigned long long>(c.seed), c.reused ? "reused " : "trained", c.final->val_loss,
                        c.final->overlap.gap_ratio);
          else
            std::printf("lambda %-8g seed %-5llu FAILED: %s\n", c.lambda, static_cast<unsigned long long>(c.seed),
                        c.error.c_str());
          std::fflush(stdout);
        };
      const SweepResult r = run_sweep(plan, so);
      std::printf("%zu cells: %zu trained, %zu reused, %zu failed\n", r.cells.size(), r.trained(), r.reused(),
                  r.failures().size());
      return r.failures().empty() ? 0 : 3;
    } else if (*analyze) {
      const fs::path in = resolve_output_dir(analyze_in);
      analysis.require_complete = !partial;
      const SweepResult r = load_sweep(in);
      const AnalysisBundle b = analyze_sweep(r, analysis);
      const fs::path out = analyze_out.empty() ? in / "analysis" : fs::path(analyze_out);
      write_analysis(b, out);
      std::cout << describe(b);
    } else if (*gap) {
      std::optional<fs::path> out;
      if (!gd_out.empty()) out = gd_out;
      const GapDemo demo = run_gap_demo(gd_model, gd_ffn, gd_trials, gd_seed, out);
      std::cout << (gd_json ? demo.json.dump(2) + "\n" : demo.summary);
      return demo.report.gap_demonstrated ? 0 : 1;
    } else if (*info) {
      const Corpus c = load_corpus(ci_corpus, ci_split);
      std::set<int> distinct(c.train_tokens.begin(), c.train_tokens.end());
      distinct.insert(c.val_tokens.begin(), c.val_tokens.end());
      const Json j{{"source", c.source},          {"digest_sha256", c.digest},
                   {"tokens", c.total_tokens()},  {"train_tokens", c.train_tokens.size()},
                   {"val_tokens", c.val_tokens.size()}, {"split_ratio", c.split_ratio},
                   {"vocab_size", c.vocab_size},  {"distinct_bytes", distinct.size()}};
      std::cout << j.dump(2) << '\n';
    }
  } catch (const Error& e) {
    std::cerr << "error: " << e.what() << '\n';
    return 2;
  }
  return 0;
}
