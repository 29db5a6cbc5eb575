// SPDX-License-Identifier: Apache-2.0
#include "moelab/trainer.hpp"

#include <chrono>
#include <cmath>
#include <fstream>
#include <numbers>

#include "moelab/checkpoint.hpp"
#include "moelab/errors.hpp"

#ifndef MOELAB_VERSION
#define MOELAB_VERSION "0.0.0"
#endif

namespace moelab {

namespace {

Json optional_number(const std::optional<double>& v) { return v ? Json(*v) : Json(nullptr); }

void write_json(const std::filesystem::path& path, const Json& j) {
  std::ofstream f(path, std::ios::trunc);
  if (!f) throw IoError("cannot write " + path.string());
  f << j.dump(2) << '\n';
  if (!f) throw IoError("failed writing " + path.string());
}

const char* schedule_name(LrSchedule s) { return s == LrSchedule::kCosine ? "cosine" : "constant"; }

}  // namespace

std::string code_version() { return MOELAB_VERSION; }

void TrainConfig::validate() const {
  if (!(lr >= 0.0)) throw ConfigError("lr must be non-negative");
  if (!(beta1 >= 0.0 && beta1 < 1.0) || !(beta2 >= 0.0 && beta2 < 1.0)) throw ConfigError("betas must be in [0, 1)");
  if (!(weight_decay >= 0.0)) throw ConfigError("weight_decay must be non-negative");
  if (iterations == 0) throw ConfigError("iterations must be positive");
  if (batch_size == 0 || seq_len == 0) throw ConfigError("batch_size and seq_len must be positive");
  if (!(lambda >= 0.0) || !std::isfinite(lambda)) throw ConfigError("lambda must be finite and non-negative");
  if (eval_interval == 0) throw ConfigError("eval_interval must be positive");
  if (grad_clip && !(*grad_clip > 0.0)) throw ConfigError("grad_clip must be positive");
  if (eval_tokens == 0) throw ConfigError("eval_tokens must be positive");
  if (!build_orth_term && lambda != 0.0) throw ConfigError("the orthogonality term can only be omitted when lambda = 0");
}

double TrainConfig::lr_at(std::size_t step) const {
  if (warmup_iters > 0 && step < warmup_iters) {
    return lr * static_cast<double>(step + 1) / static_cast<double>(warmup_iters);
  }
  if (schedule == LrSchedule::kConstant) return lr;
  const double span = static_cast<double>(std::max<std::size_t>(1, iterations - std::min(iterations, warmup_iters)));
  const double progress = std::min(1.0, static_cast<double>(step - std::min(step, warmup_iters)) / span);
  const double floor = lr * min_lr_ratio;
  return floor + 0.5 * (1.0 + std::cos(std::numbers::pi * progress)) * (lr - floor);
}

void to_json(Json& j, const TrainConfig& c) {
  j = Json{{"lr", c.lr},
           {"beta1", c.beta1},
           {"beta2", c.beta2},
           {"eps", c.eps},
           {"weight_decay", c.weight_decay},
           {"iterations", c.iterations},
           {"batch_size", c.batch_size},
           {"seq_len", c.seq_len},
           {"lambda", c.lambda},
           {"seed", c.seed},
           {"eval_interval", c.eval_interval},
           {"grad_clip", optional_number(c.grad_clip)},
           {"lr_schedule", schedule_name(c.schedule)},
           {"warmup_iters", c.warmup_iters},
           {"min_lr_ratio", c.min_lr_ratio},
           {"eval_tokens", c.eval_tokens},
           {"build_orth_term", c.build_orth_term}};
}

void from_json(const Json& j, TrainConfig& c) {
  TrainConfig d;
  c.lr = j.value("lr", d.lr);
  c.beta1 = j.value("beta1", d.beta1);
  c.beta2 = j.value("beta2", d.beta2);
  c.eps = j.value("eps", d.eps);
  c.weight_decay = j.value("weight_decay", d.weight_decay);
  c.iterations = j.value("iterations", d.iterations);
  c.batch_size = j.value("batch_size", d.batch_size);
  c.seq_len = j.value("seq_len", d.seq_len);
  c.lambda = j.value("lambda", d.lambda);
  c.seed = j.value("seed", d.seed);
  c.eval_interval = j.value("eval_interval", d.eval_interval);
  c.grad_clip = j.contains("grad_clip") && !j["grad_clip"].is_null() ? std::optional(j["grad_clip"].get<double>())
                                                                     : std::nullopt;
  const std::string schedule = j.value("lr_schedule", std::string("constant"));
  if (schedule != "constant" && schedule != "cosine") throw ConfigError("unknown lr_schedule '" + schedule + "'");
  c.schedule = schedule == "cosine" ? LrSchedule::kCosine : LrSchedule::kConstant;
  c.warmup_iters = j.value("warmup_iters", d.warmup_iters);
  c.min_lr_ratio = j.value("min_lr_ratio", d.min_lr_ratio);
  c.eval_tokens = j.value("eval_tokens", d.eval_tokens);
  c.build_orth_term = j.value("build_orth_term", d.build_orth_term);
}

void to_json(Json& j, const MetricsRecord& r) {
  j = Json{{"step", r.step},
           {"train_loss", optional_number(r.train_loss)},
           {"val_loss", r.val_loss},
           {"orth_loss", r.orth_loss},
           {"lr", r.lr},
           {"overlap", r.overlap},
           {"eval_tokens", r.eval_tokens},
           {"skipped_activation_pairs", r.skipped_activation_pairs},
           {"activation_flagged", r.activation_flagged}};
}

void from_json(const Json& j, MetricsRecord& r) {
  r.step = j.at("step").get<std::size_t>();
  r.train_loss = j.at("train_loss").is_null() ? std::nullopt : std::optional(j.at("train_loss").get<double>());
  r.val_loss = j.at("val_loss").get<double>();
  r.orth_loss = j.at("orth_loss").get<double>();
  r.lr = j.at("lr").get<double>();
  r.overlap = j.at("overlap").get<OverlapReport>();
  r.eval_tokens = j.at("eval_tokens").get<std::size_t>();
  r.skipped_activation_pairs = j.at("skipped_activation_pairs").get<std::size_t>();
  r.activation_flagged = j.at("activation_flagged").get<bool>();
}

StepResult train_step(MoEModel& model, AdamW& optimizer, const Batch& batch, const TrainConfig& config,
                      std::size_t step) {
  model.zero_grad();
  Tape tape;
  ForwardResult fwd = forward(tape, model, batch.inputs, batch.batch, batch.seq, false);
  Var lm = ops::cross_entropy(fwd.logits, batch.targets);
  StepResult res;
  res.lm_loss = lm.item();
  Var total = lm;
  if (config.build_orth_term) {
    Var orth = orthogonality_loss(tape, model);
    res.orth_loss = orth.item();
    total = ops::add(lm, ops::scale(orth, config.lambda));
  } else {
    res.orth_loss = orthogonality_loss_value(model.up_projections());
  }
  res.total_loss = total.item();
  if (!std::isfinite(res.lm_loss) || !std::isfinite(res.total_loss)) {
    throw DivergenceError("non-finite loss at step " + std::to_string(step) + " (lm=" + std::to_string(res.lm_loss) +
                          ", orth=" + std::to_string(res.orth_loss) + ")");
  }
  tape.backward(total);
  if (config.grad_clip) {
    auto params = model.parameters();
    res.grad_norm = clip_grad_norm(params, *config.grad_clip);
  }
  optimizer.step(config.lr_at(step));
  return res;
}

EvalResult evaluate(MoEModel& model, const Corpus& corpus, std::size_t seq_len, std::size_t eval_tokens,
                    std::size_t batch_size) {
  const std::size_t windows = std::max<std::size_t>(1, eval_tokens / seq_len);
  const Batch all = sequential_windows(corpus.val_tokens, seq_len, windows);
  ActivationMsoAccumulator acc;
  double loss_sum = 0.0;
  for (std::size_t w0 = 0; w0 < all.batch; w0 += batch_size) {
    const std::size_t nb = std::min(batch_size, all.batch - w0);
    const auto first = static_cast<std::ptrdiff_t>(w0 * seq_len);
    const auto last = static_cast<std::ptrdiff_t>((w0 + nb) * seq_len);
    std::vector<int> inputs(all.inputs.begin() + first, all.inputs.begin() + last);
    std::vector<int> targets(all.targets.begin() + first, all.targets.begin() + last);
    Tape tape(false);
    ForwardResult fwd = forward(tape, model, inputs, nb, seq_len, true);
    loss_sum += ops::cross_entropy(fwd.logits, targets).item() * static_cast<double>(nb * seq_len);
    for (const auto& tr : fwd.traces) acc.add(tr);
  }
  EvalResult res;
  res.tokens = all.batch * seq_len;
  res.val_loss = loss_sum / static_cast<double>(res.tokens);
  res.activation = acc.result();
  res.overlap = make_overlap_report(weight_mso(model.up_projections()), res.activation);
  return res;
}

Json run_metadata(const MoEModelConfig& model_config, const TrainConfig& train_config, const Corpus& corpus) {
  return Json{{"model_config", model_config},
              {"train_config", train_config},
              {"corpus",
               {{"source", corpus.source},
                {"digest_sha256", corpus.digest},
                {"split_ratio", corpus.split_ratio},
                {"split", "contiguous tail"},
                {"train_tokens", corpus.train_tokens.size()},
                {"val_tokens", corpus.val_tokens.size()}}},
              {"activation_mso_data", "validation"},
              {"lr_schedule", schedule_name(train_config.schedule)},
              {"warmup_iters", train_config.warmup_iters},
              {"load_balancing_loss", false},
              {"code_version", code_version()}};
}

TrainingRun run_training(MoEModelConfig model_config, const TrainConfig& train_config, const Corpus& corpus,
                         const RunOptions& options) {
  train_config.validate();
  model_config.seed = train_config.seed;
  model_config.validate();
  if (model_config.vocab_size < corpus.vocab_size) throw ConfigError("model vocabulary smaller than corpus vocabulary");
  if (train_config.seq_len > model_config.context_length) throw ConfigError("seq_len exceeds context_length");

  const auto started = std::chrono::steady_clock::now();
  TrainingRun run{{}, MoEModel(model_config), std::nullopt, 0.0};
  MoEModel& model = run.model;
  AdamW optimizer(model.parameters(), train_config.adamw());
  Rng data_rng = Rng::substream(train_config.seed, "data");

  Json meta = run_metadata(model_config, train_config, corpus);
  meta.update(options.metadata);
  std::ofstream metrics;
  if (options.output_dir) {
    std::filesystem::create_directories(*options.output_dir);
    meta["status"] = "running";
    write_json(*options.output_dir / "run.json", meta);
    metrics.open(*options.output_dir / "metrics.jsonl", std::ios::trunc);
    if (!metrics) throw IoError("cannot write metrics stream in " + options.output_dir->string());
  }

  double loss_acc = 0.0;
  std::size_t loss_count = 0;
  auto snapshot = [&](std::size_t step) {
    EvalResult ev = evaluate(model, corpus, train_config.seq_len, train_config.eval_tokens, train_config.batch_size);
    MetricsRecord rec;
    rec.step = step;
    if (loss_count > 0) rec.train_loss = loss_acc / static_cast<double>(loss_count);
    rec.val_loss = ev.val_loss;
    rec.orth_loss = orthogonality_loss_value(model.up_projections());
    rec.lr = train_config.lr_at(std::min(step, train_config.iterations - 1));
    rec.overlap = ev.overlap;
    rec.eval_tokens = ev.tokens;
    rec.skipped_activation_pairs = ev.activation.skipped_pairs;
    rec.activation_flagged = ev.activation.flagged;
    loss_acc = 0.0;
    loss_count = 0;
    if (metrics.is_open()) metrics << Json(rec).dump() << '\n' << std::flush;
    if (options.on_record) options.on_record(rec);
    run.records.push_back(std::move(rec));
  };

  snapshot(0);
  for (std::size_t step = 0; step < train_config.iterations; ++step) {
    const Batch batch = sample_batch(corpus, train_config.batch_size, train_config.seq_len, data_rng);
    StepResult res;
    try {
      res = train_step(model, optimizer, batch, train_config, step);
    } catch (const DivergenceError& e) {
      if (options.output_dir) {
        Json diag{{"step", step}, {"error", e.what()}, {"records", run.records}};
        Json finite = Json::object();
        for (auto& p : model.parameters()) finite[p.name] = p.tensor->all_finite();
        diag["parameters_finite"] = finite;
        write_json(*options.output_dir / "diagnostic.json", diag);
        meta["status"] = "failed";
        meta["error"] = e.what();
        write_json(*options.output_dir / "run.json", meta);
      }
      throw;
    }
    loss_acc += res.lm_loss;
    ++loss_count;
    const std::size_t done = step + 1;
    if (done % train_config.eval_interval == 0 || done == train_config.iterations) snapshot(done);
  }
  run.wall_seconds = std::chrono::duration<double>(std::chrono::steady_clock::now() - started).count();

  if (options.output_dir) {
    run.checkpoint = *options.output_dir / "checkpoint.bin";
    save_checkpoint(*run.checkpoint, model);
    meta["status"] = "completed";
    meta["wall_seconds"] = run.wall_seconds;
    meta["records"] = run.records.size();
    meta["final"] = run.records.back();
    write_json(*options.output_dir / "run.json", meta);
  }
  return run;
}

}  // namespace moelab
