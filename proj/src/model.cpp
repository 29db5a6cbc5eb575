// SPDX-License-Identifier: Apache-2.0
#include "moelab/model.hpp"

#include <algorithm>
#include <numeric>

#include "moelab/errors.hpp"
#include "moelab/rng.hpp"

namespace moelab {

namespace {

constexpr double kInitStd = 0.02;
constexpr double kLayerNormEps = 1e-5;

Tensor normal_matrix(Rng& rng, std::size_t rows, std::size_t cols, bool initialize) {
  Tensor t({rows, cols});
  if (initialize)
    for (double& v : t.data()) v = rng.normal(0.0, kInitStd);
  t.set_requires_grad(true);
  return t;
}

LayerNormParams make_layernorm(std::size_t d) {
  LayerNormParams p{Tensor::filled({d}, 1.0), Tensor::zeros({d})};
  p.gain.set_requires_grad(true);
  p.bias.set_requires_grad(true);
  return p;
}

Var apply_layernorm(Tape& tape, LayerNormParams& p, Var x) {
  return ops::layernorm(x, tape.parameter(p.gain), tape.parameter(p.bias), kLayerNormEps);
}

}  // namespace

MoEModelConfig MoEModelConfig::desk() { return MoEModelConfig{}; }

MoEModelConfig MoEModelConfig::full_scale() {
  MoEModelConfig c;
  c.vocab_size = 50304;
  c.d_model = 512;
  c.n_layers = 6;
  c.n_heads = 8;
  c.n_experts = 8;
  c.top_k = 2;
  c.d_ffn = 2048;
  c.context_length = 1024;
  c.tie_embeddings = true;
  return c;
}

void MoEModelConfig::validate() const {
  auto positive = [](std::size_t v, const char* name) {
    if (v == 0) throw ConfigError(std::string(name) + " must be positive");
  };
  positive(vocab_size, "vocab_size");
  positive(d_model, "d_model");
  positive(n_layers, "n_layers");
  positive(n_heads, "n_heads");
  positive(n_experts, "n_experts");
  positive(top_k, "top_k");
  positive(d_ffn, "d_ffn");
  positive(context_length, "context_length");
  if (d_model % n_heads != 0) throw ConfigError("d_model must be divisible by n_heads");
  if (top_k > n_experts) {
    throw ConfigError("top_k (" + std::to_string(top_k) + ") exceeds n_experts (" + std::to_string(n_experts) + ")");
  }
  if (d_ffn < 2 || d_model < 2) throw ConfigError("d_model and d_ffn must be at least 2 for LayerNorm");
}

std::size_t MoEModelConfig::parameter_count() const {
  const std::size_t d = d_model;
  const std::size_t expert = 2 * d_ffn * d + 2 * d_ffn;
  const std::size_t block = 2 * d + 4 * d * d + 2 * d + n_experts * d + n_experts * expert;
  const std::size_t head = tie_embeddings ? 0 : vocab_size * d;
  return vocab_size * d + context_length * d + n_layers * block + 2 * d + head;
}

void to_json(Json& j, const MoEModelConfig& c) {
  j = Json{{"vocab_size", c.vocab_size}, {"d_model", c.d_model},     {"n_layers", c.n_layers},
           {"n_heads", c.n_heads},       {"n_experts", c.n_experts}, {"top_k", c.top_k},
           {"d_ffn", c.d_ffn},           {"context_length", c.context_length},
           {"tie_embeddings", c.tie_embeddings}, {"seed", c.seed}};
}

void from_json(const Json& j, MoEModelConfig& c) {
  MoEModelConfig d;
  c.vocab_size = j.value("vocab_size", d.vocab_size);
  c.d_model = j.value("d_model", d.d_model);
  c.n_layers = j.value("n_layers", d.n_layers);
  c.n_heads = j.value("n_heads", d.n_heads);
  c.n_experts = j.value("n_experts", d.n_experts);
  c.top_k = j.value("top_k", d.top_k);
  c.d_ffn = j.value("d_ffn", d.d_ffn);
  c.context_length = j.value("context_length", d.context_length);
  c.tie_embeddings = j.value("tie_embeddings", d.tie_embeddings);
  c.seed = j.value("seed", d.seed);
}

MoEModel::MoEModel(MoEModelConfig config) : MoEModel(std::move(config), true) {}

MoEModel MoEModel::uninitialized(MoEModelConfig config) { return MoEModel(std::move(config), false); }

MoEModel::MoEModel(MoEModelConfig config, bool initialize) : config_(std::move(config)) {
  config_.validate();
  const auto& c = config_;
  Rng rng = Rng::substream(c.seed, "init");
  token_embedding = normal_matrix(rng, c.vocab_size, c.d_model, initialize);
  position_embedding = normal_matrix(rng, c.context_length, c.d_model, initialize);
  blocks.reserve(c.n_layers);
  for (std::size_t l = 0; l < c.n_layers; ++l) {
    Block b;
    b.ln_attn = make_layernorm(c.d_model);
    b.attn.wq = normal_matrix(rng, c.d_model, c.d_model, initialize);
    b.attn.wk = normal_matrix(rng, c.d_model, c.d_model, initialize);
    b.attn.wv = normal_matrix(rng, c.d_model, c.d_model, initialize);
    b.attn.wo = normal_matrix(rng, c.d_model, c.d_model, initialize);
    b.ln_moe = make_layernorm(c.d_model);
    b.moe.router.w_gate = normal_matrix(rng, c.n_experts, c.d_model, initialize);
    for (std::size_t e = 0; e < c.n_experts; ++e) {
      Expert ex;
      ex.w_up = normal_matrix(rng, c.d_ffn, c.d_model, initialize);
      ex.w_down = normal_matrix(rng, c.d_model, c.d_ffn, initialize);
      ex.norm = make_layernorm(c.d_ffn);
      b.moe.experts.push_back(std::move(ex));
    }
    blocks.push_back(std::move(b));
  }
  ln_final = make_layernorm(c.d_model);
  if (!c.tie_embeddings) lm_head = normal_matrix(rng, c.vocab_size, c.d_model, initialize);
}

std::vector<NamedParameter> MoEModel::parameters() {
  std::vector<NamedParameter> out;
  out.push_back({"tok_emb", &token_embedding, true});
  out.push_back({"pos_emb", &position_embedding, true});
  for (std::size_t l = 0; l < blocks.size(); ++l) {
    Block& b = blocks[l];
    const std::string p = "layers." + std::to_string(l) + ".";
    out.push_back({p + "ln_attn.gain", &b.ln_attn.gain, false});
    out.push_back({p + "ln_attn.bias", &b.ln_attn.bias, false});
    out.push_back({p + "attn.wq", &b.attn.wq, true});
    out.push_back({p + "attn.wk", &b.attn.wk, true});
    out.push_back({p + "attn.wv", &b.attn.wv, true});
    out.push_back({p + "attn.wo", &b.attn.wo, true});
    out.push_back({p + "ln_moe.gain", &b.ln_moe.gain, false});
    out.push_back({p + "ln_moe.bias", &b.ln_moe.bias, false});
    out.push_back({p + "moe.router", &b.moe.router.w_gate, true});
    for (std::size_t e = 0; e < b.moe.experts.size(); ++e) {
      Expert& ex = b.moe.experts[e];
      const std::string q = p + "moe.experts." + std::to_string(e) + ".";
      out.push_back({q + "w_up", &ex.w_up, true});
      out.push_back({q + "w_down", &ex.w_down, true});
      out.push_back({q + "norm.gain", &ex.norm.gain, false});
      out.push_back({q + "norm.bias", &ex.norm.bias, false});
    }
  }
  out.push_back({"ln_final.gain", &ln_final.gain, false});
  out.push_back({"ln_final.bias", &ln_final.bias, false});
  if (!config_.tie_embeddings) out.push_back({"lm_head", &lm_head, true});
  return out;
}

std::size_t MoEModel::parameter_count() {
  std::size_t n = 0;
  for (const auto& p : parameters()) n += p.tensor->numel();
  return n;
}

ExpertWeights MoEModel::up_projections() const {
  ExpertWeights w;
  w.reserve(blocks.size());
  for (const Block& b : blocks) {
    std::vector<const Tensor*> layer;
    for (const Expert& e : b.moe.experts) layer.push_back(&e.w_up);
    w.push_back(std::move(layer));
  }
  return w;
}

void MoEModel::zero_grad() {
  for (auto& p : parameters()) p.tensor->zero_grad();
}

Var expert_forward(Tape& tape, Expert& expert, Var x) {
  Var up = ops::matmul_nt(x, tape.parameter(expert.w_up));
  Var act = ops::silu(up);
  Var normed = apply_layernorm(tape, expert.norm, act);
  return ops::matmul_nt(normed, tape.parameter(expert.w_down));
}

Tensor expert_forward(Expert& expert, const Tensor& x) {
  Tape tape(false);
  const bool single = x.rank() == 1;
  Var in = tape.constant(single ? x.reshaped({1, x.numel()}) : x);
  Var out = expert_forward(tape, expert, in);
  return single ? out.value().reshaped({out.value().numel()}) : out.value();
}

std::vector<std::size_t> select_top_k(std::span<const double> logits, std::size_t tokens, std::size_t n_experts,
                                      std::size_t k) {
  if (k == 0 || k > n_experts) {
    throw ConfigError("top_k must be in [1, n_experts]; got k=" + std::to_string(k) +
                      ", N=" + std::to_string(n_experts));
  }
  std::vector<std::size_t> selected(tokens * k);
  std::vector<std::size_t> order(n_experts);
  for (std::size_t t = 0; t < tokens; ++t) {
    const double* row = logits.data() + t * n_experts;
    std::iota(order.begin(), order.end(), std::size_t{0});
    std::stable_sort(order.begin(), order.end(), [row](std::size_t a, std::size_t b) { return row[a] > row[b]; });
    std::copy_n(order.begin(), k, selected.begin() + t * k);
  }
  return selected;
}

MoELayerOutput moe_layer_forward(Tape& tape, MoELayer& layer, Var x, std::size_t top_k, std::size_t layer_index,
                                 bool record_trace) {
  const std::size_t n_experts = layer.experts.size();
  const std::size_t tokens = x.value().rows();
  const std::size_t d = x.value().cols();
  Var logits = ops::matmul_nt(x, tape.parameter(layer.router.w_gate));
  const auto selected = select_top_k(logits.value().data(), tokens, n_experts, top_k);
  Var gates = ops::topk_softmax(logits, selected, top_k);

  std::vector<std::vector<std::size_t>> rows_of(n_experts);
  std::vector<ops::SlotRoute> routes(tokens * top_k);
  for (std::size_t t = 0; t < tokens; ++t) {
    for (std::size_t s = 0; s < top_k; ++s) {
      const std::size_t e = selected[t * top_k + s];
      routes[t * top_k + s] = {e, rows_of[e].size()};
      rows_of[e].push_back(t);
    }
  }
  std::vector<Var> outputs(n_experts);
  for (std::size_t e = 0; e < n_experts; ++e) {
    if (rows_of[e].empty()) continue;
    outputs[e] = expert_forward(tape, layer.experts[e], ops::gather_rows(x, rows_of[e]));
  }
  MoELayerOutput result{ops::moe_combine(gates, outputs, routes, tokens, top_k), {}};
  if (record_trace) {
    RoutingTrace& tr = result.trace;
    tr.layer = layer_index;
    tr.tokens = tokens;
    tr.k = top_k;
    tr.d_model = d;
    tr.experts = selected;
    tr.gates.assign(gates.value().data().begin(), gates.value().data().end());
    tr.outputs.resize(tokens * top_k * d);
    for (std::size_t i = 0; i < routes.size(); ++i) {
      auto src = outputs[routes[i].expert].value().data().subspan(routes[i].row * d, d);
      std::copy(src.begin(), src.end(), tr.outputs.begin() + i * d);
    }
  }
  return result;
}

ForwardResult forward(Tape& tape, MoEModel& model, std::span<const int> tokens, std::size_t batch, std::size_t seq,
                      bool record_traces) {
  const auto& c = model.config();
  if (seq == 0 || batch == 0) throw InputError("forward: empty input");
  if (seq > c.context_length) {
    throw InputError("sequence length " + std::to_string(seq) + " exceeds context length " +
                     std::to_string(c.context_length));
  }
  if (tokens.size() != batch * seq) throw InputError("forward: token count != batch·seq");

  std::vector<int> positions(batch * seq);
  for (std::size_t b = 0; b < batch; ++b)
    for (std::size_t t = 0; t < seq; ++t) positions[b * seq + t] = static_cast<int>(t);

  Var tok_table = tape.parameter(model.token_embedding);
  Var x = ops::add(ops::embedding(tok_table, tokens), ops::embedding(tape.parameter(model.position_embedding), positions));
  ForwardResult out;
  for (std::size_t l = 0; l < model.blocks.size(); ++l) {
    Block& b = model.blocks[l];
    Var a = apply_layernorm(tape, b.ln_attn, x);
    Var q = ops::matmul_nt(a, tape.parameter(b.attn.wq));
    Var k = ops::matmul_nt(a, tape.parameter(b.attn.wk));
    Var v = ops::matmul_nt(a, tape.parameter(b.attn.wv));
    Var att = ops::causal_attention(q, k, v, batch, seq, c.n_heads);
    x = ops::add(x, ops::matmul_nt(att, tape.parameter(b.attn.wo)));
    Var m = apply_layernorm(tape, b.ln_moe, x);
    MoELayerOutput moe = moe_layer_forward(tape, b.moe, m, c.top_k, l, record_traces);
    x = ops::add(x, moe.output);
    if (record_traces) out.traces.push_back(std::move(moe.trace));
  }
  x = apply_layernorm(tape, model.ln_final, x);
  out.logits = ops::matmul_nt(x, tape.parameter(c.tie_embeddings ? model.token_embedding : model.lm_head));
  return out;
}

SequenceOutput model_forward(MoEModel& model, std::span<const int> tokens) {
  Tape tape(false);
  ForwardResult r = forward(tape, model, tokens, 1, tokens.size(), true);
  return {r.logits.value(), std::move(r.traces)};
}

}  // namespace moelab
