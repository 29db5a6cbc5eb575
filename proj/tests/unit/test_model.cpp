// SPDX-License-Identifier: Apache-2.0
#include <doctest.h>

#include <cmath>
#include <numeric>

#include "moelab/errors.hpp"
#include "moelab/model.hpp"
#include "support.hpp"

using namespace moelab;
using moelab::testing::grad_check;
using moelab::testing::random_tensor;

namespace {
MoEModelConfig toy() {
  MoEModelConfig c;
  c.vocab_size = 16;
  c.d_model = 8;
  c.n_layers = 2;
  c.n_heads = 2;
  c.n_experts = 3;
  c.top_k = 2;
  c.d_ffn = 12;
  c.context_length = 10;
  c.seed = 7;
  return c;
}

std::vector<int> tokens_from(std::uint64_t seed, std::size_t n, int vocab) {
  Rng rng(seed);
  std::vector<int> t(n);
  for (int& v : t) v = static_cast<int>(rng.uniform_int(0, vocab - 1));
  return t;
}
}  // namespace

TEST_CASE("parameter count of the default shape") {
  // embeddings 256·64 + 128·64, lm head 256·64, final norm 2·64;
  // per layer: two norms 4·64, attention 4·64², router 4·64, experts 4·(2·256·64 + 2·256)
  const std::size_t per_layer = 4 * 64 + 4 * 64 * 64 + 4 * 64 + 4 * (2 * 256 * 64 + 2 * 256);
  const std::size_t expected = 256 * 64 + 128 * 64 + 256 * 64 + 2 * 64 + 2 * per_layer;
  CHECK(expected == 341120);
  MoEModelConfig c = MoEModelConfig::desk();
  CHECK(c.parameter_count() == expected);
  MoEModel m(c);
  CHECK(m.parameter_count() == expected);
}

TEST_CASE("full-scale shape has about 130M parameters") {
  const MoEModelConfig c = MoEModelConfig::full_scale();
  CHECK(c.parameter_count() == 133469184);
  CHECK(c.n_experts == 8);
  CHECK(c.top_k == 2);
}

TEST_CASE("config validation") {
  MoEModelConfig c = toy();
  CHECK_NOTHROW(c.validate());
  c.top_k = 4;
  CHECK_THROWS_AS(c.validate(), ConfigError);
  c = toy();
  c.n_heads = 3;
  CHECK_THROWS_AS(c.validate(), ConfigError);
  c = toy();
  c.d_model = 0;
  CHECK_THROWS_AS(c.validate(), ConfigError);
  c = toy();
  Json j = c;
  CHECK(j.get<MoEModelConfig>() == c);
}

TEST_CASE("initialization is seeded") {
  MoEModel a(toy()), b(toy());
  MoEModelConfig other = toy();
  other.seed = 8;
  MoEModel c(other);
  auto pa = a.parameters(), pb = b.parameters(), pc = c.parameters();
  REQUIRE(pa.size() == pb.size());
  bool any_diff = false;
  for (std::size_t i = 0; i < pa.size(); ++i) {
    CHECK(pa[i].name == pb[i].name);
    CHECK(pa[i].tensor->storage() == pb[i].tensor->storage());
    any_diff = any_diff || pa[i].tensor->storage() != pc[i].tensor->storage();
  }
  CHECK(any_diff);
  CHECK(a.blocks[0].moe.experts[0].norm.gain[0] == 1.0);
  CHECK(a.blocks[0].moe.experts[0].norm.bias[0] == 0.0);
}

TEST_CASE("decay flags cover matrices and embeddings only") {
  MoEModel m(toy());
  for (const auto& p : m.parameters()) {
    const bool is_norm = p.name.find("gain") != std::string::npos || p.name.find("bias") != std::string::npos;
    CHECK_MESSAGE(p.decay == !is_norm, p.name);
  }
}

TEST_CASE("initial loss is close to log vocabulary") {
  MoEModel m(MoEModelConfig::desk());
  const auto tokens = tokens_from(3, 4 * 64 + 1, 256);
  Tape tape(false);
  const std::span<const int> in(tokens.data(), 4 * 64);
  auto fwd = forward(tape, m, in, 4, 64, false);
  const std::vector<int> targets(tokens.begin() + 1, tokens.end());
  const double loss = ops::cross_entropy(fwd.logits, targets).item();
  CHECK(std::abs(loss - std::log(256.0)) < 0.02 * std::log(256.0));
}

TEST_CASE("top-k selection breaks ties toward the lower index") {
  const double logits[] = {1.0, 1.0, 0.5, 1.0, /* token 2 */ -1.0, 2.0, 2.0, 3.0};
  const auto sel = select_top_k(logits, 2, 4, 2);
  CHECK(sel == std::vector<std::size_t>{0, 1, 3, 1});
  CHECK_THROWS_AS(select_top_k(logits, 2, 4, 5), ConfigError);
}

TEST_CASE("MoE layer output, gates and trace agree") {
  MoEModel m(toy());
  MoELayer& layer = m.blocks[0].moe;
  const Tensor x = random_tensor({6, 8}, 41);
  Tape tape(false);
  auto out = moe_layer_forward(tape, layer, tape.constant(x), 2, 0, true);
  const RoutingTrace& tr = out.trace;
  REQUIRE(tr.tokens == 6);
  REQUIRE(tr.k == 2);
  for (std::size_t t = 0; t < 6; ++t) {
    CHECK(tr.gates[t * 2] + tr.gates[t * 2 + 1] == doctest::Approx(1.0).epsilon(1e-15));
    CHECK(tr.gates[t * 2] >= tr.gates[t * 2 + 1]);
    CHECK(tr.experts[t * 2] != tr.experts[t * 2 + 1]);
    std::vector<double> row(x.data().begin() + t * 8, x.data().begin() + (t + 1) * 8);
    std::vector<double> expect(8, 0.0);
    for (std::size_t s = 0; s < 2; ++s) {
      const Tensor h = expert_forward(layer.experts[tr.experts[t * 2 + s]], Tensor({8}, row));
      const auto traced = tr.output(t, s);
      for (std::size_t c = 0; c < 8; ++c) {
        REQUIRE(traced[c] == h[c]);  // recorded h is the expert's own output, bit for bit
        expect[c] += tr.gates[t * 2 + s] * h[c];
      }
    }
    for (std::size_t c = 0; c < 8; ++c) CHECK(out.output.value().at(t, c) == doctest::Approx(expect[c]).epsilon(1e-14));
  }
}

TEST_CASE("causality: future tokens never change earlier logits") {
  MoEModel m(toy());
  const auto base = tokens_from(5, 10, 16);
  const SequenceOutput ref = model_forward(m, base);
  for (std::size_t j : {3u, 7u, 9u}) {
    auto changed = base;
    changed[j] = (changed[j] + 5) % 16;
    for (std::size_t after = j + 1; after < changed.size(); ++after) changed[after] = (changed[after] + 3) % 16;
    const SequenceOutput alt = model_forward(m, changed);
    for (std::size_t i = 0; i < j * 16; ++i) REQUIRE(alt.logits[i] == ref.logits[i]);
    bool differs = false;
    for (std::size_t i = j * 16; i < 10 * 16; ++i) differs = differs || alt.logits[i] != ref.logits[i];
    CHECK(differs);
  }
}

TEST_CASE("forward rejects bad inputs") {
  MoEModel m(toy());
  const auto too_long = tokens_from(1, 11, 16);
  CHECK_THROWS_AS(model_forward(m, too_long), InputError);
  const std::vector<int> bad = {1, 2, 16};
  CHECK_THROWS_AS(model_forward(m, bad), InputError);
}

TEST_CASE("tied embeddings reuse the token table") {
  MoEModelConfig c = toy();
  c.tie_embeddings = true;
  MoEModel m(c);
  CHECK(m.parameter_count() == c.parameter_count());
  CHECK(c.parameter_count() + 16 * 8 == toy().parameter_count());
  const auto tokens = tokens_from(2, 6, 16);
  CHECK(model_forward(m, tokens).logits.all_finite());
}

TEST_CASE("language-model loss gradients match finite differences") {
  MoEModel m(toy());
  const auto tokens = tokens_from(9, 2 * 5 + 1, 16);
  const std::vector<int> inputs(tokens.begin(), tokens.begin() + 10);
  const std::vector<int> targets(tokens.begin() + 1, tokens.end());
  std::vector<Tensor*> params;
  for (auto& p : m.parameters()) params.push_back(p.tensor);
  auto f = [&](Tape& tape, const std::vector<Var>&) {
    return ops::cross_entropy(forward(tape, m, inputs, 2, 5, false).logits, targets);
  };
  const auto r = grad_check(f, params, 1e-4);
  CHECK(r.checked == m.parameter_count());
  CHECK_MESSAGE(r.max_rel_error < 1e-5, m.parameters()[r.worst].name);
}
