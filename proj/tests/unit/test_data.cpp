// SPDX-License-Identifier: Apache-2.0
#include <doctest.h>

#include <filesystem>
#include <fstream>
#include <set>

#include "moelab/data.hpp"
#include "moelab/errors.hpp"

using namespace moelab;

namespace {
std::string sample_text(std::size_t n) {
  std::string s;
  for (std::size_t i = 0; i < n; ++i) s.push_back(static_cast<char>('a' + (i * 7 + i / 13) % 26));
  return s;
}
}  // namespace

TEST_CASE("byte tokenizer round trip") {
  const std::string text = "Hi! caf\xc3\xa9 \x01\xff";
  const auto tokens = tokenize(text);
  CHECK(tokens.size() == text.size());
  CHECK(tokens[0] == 'H');
  CHECK(tokens.back() == 255);
  CHECK(detokenize(tokens) == text);
  const std::vector<int> bad = {65, 256};
  CHECK_THROWS_AS(detokenize(bad), InputError);
}

TEST_CASE("sha256 digests") {
  CHECK(sha256_hex("abc") == "ba7816bf8f01cfea414140de5dae2223b00361a396177a9cb410ff61f20015ad");
  CHECK(sha256_hex("") == "e3b0c44298fc1c149afbf4c8996fb92427ae41e4649b934ca495991b7852b855");
}

TEST_CASE("contiguous tail split") {
  const std::string text = sample_text(1000);
  const Corpus c = make_corpus(text, 0.1);
  CHECK(c.val_tokens.size() == 100);
  CHECK(c.train_tokens.size() == 900);
  CHECK(c.total_tokens() == 1000);
  CHECK(detokenize(c.train_tokens) + detokenize(c.val_tokens) == text);
  CHECK(c.digest == sha256_hex(text));
  CHECK_THROWS_AS(make_corpus(text, 0.0), ConfigError);
  CHECK_THROWS_AS(make_corpus(text, 1.0), ConfigError);
  CHECK_THROWS_AS(make_corpus("abc", 0.1), ConfigError);  // floor(0.3) = 0 validation tokens
  CHECK_THROWS_AS(make_corpus("", 0.5), InputError);
}

TEST_CASE("loading from disk") {
  const auto path = std::filesystem::temp_directory_path() / "moelab_test_corpus.txt";
  {
    std::ofstream f(path, std::ios::binary);
    f << sample_text(500);
  }
  const Corpus c = load_corpus(path, 0.2);
  CHECK(c.total_tokens() == 500);
  CHECK(c.source == path.string());
  std::filesystem::remove(path);
  CHECK_THROWS_AS(load_corpus(path, 0.2), InputError);
}

TEST_CASE("bundled corpus: token count equals byte count") {
  const std::filesystem::path path = std::filesystem::path(MOELAB_SOURCE_DIR) / "data" / "tiny_tales.txt";
  const Corpus c = load_corpus(path, 0.1);
  CHECK(c.total_tokens() == std::filesystem::file_size(path));
  CHECK(c.total_tokens() >= 1000000);
  CHECK(c.val_tokens.size() == c.total_tokens() / 10);
}

TEST_CASE("batches are shifted windows of the training split") {
  const Corpus c = make_corpus(sample_text(400), 0.25);
  Rng rng(1);
  const Batch b = sample_batch(c, 6, 16, rng);
  REQUIRE(b.inputs.size() == 96);
  for (std::size_t r = 0; r < 6; ++r) {
    const std::size_t s = b.starts[r];
    CHECK(s + 16 < c.train_tokens.size());
    for (std::size_t i = 0; i < 16; ++i) {
      CHECK(b.inputs[r * 16 + i] == c.train_tokens[s + i]);
      CHECK(b.targets[r * 16 + i] == c.train_tokens[s + i + 1]);
    }
  }
  Rng again(1);
  CHECK(sample_batch(c, 6, 16, again).starts == b.starts);
  CHECK_THROWS_AS(sample_batch(c, 1, 300, rng), ConfigError);
}

TEST_CASE("window starts are uniform (chi-square)") {
  const Corpus c = make_corpus(sample_text(2100), 0.5);  // 1050 training tokens
  const std::size_t seq = 49;
  const std::size_t n_starts = c.train_tokens.size() - seq;  // [0, 1000]
  const std::size_t bins = 20, draws = 40000;
  std::vector<double> counts(bins, 0.0);
  Rng rng = Rng::substream(42, "data");
  std::set<std::size_t> seen;
  for (std::size_t i = 0; i < draws / 8; ++i) {
    const Batch b = sample_batch(c, 8, seq, rng);
    for (std::size_t s : b.starts) {
      REQUIRE(s < n_starts);
      seen.insert(s);
      counts[std::min(bins - 1, s * bins / n_starts)] += 1.0;
    }
  }
  double chi2 = 0.0;
  for (std::size_t k = 0; k < bins; ++k) {
    const double lo = std::ceil(static_cast<double>(k * n_starts) / bins);
    const double hi = k + 1 == bins ? n_starts : std::ceil(static_cast<double>((k + 1) * n_starts) / bins);
    const double expected = draws * (hi - lo) / n_starts;
    chi2 += (counts[k] - expected) * (counts[k] - expected) / expected;
  }
  CHECK(chi2 < 43.82);  // 19 df, upper 0.1% point
  CHECK(seen.count(0) == 1);
  CHECK(seen.count(n_starts - 1) == 1);
}

TEST_CASE("sequential evaluation windows") {
  const std::vector<int> tokens(100, 7);
  const Batch b = sequential_windows(tokens, 10, 4);
  CHECK(b.batch == 4);
  CHECK(b.starts == std::vector<std::size_t>{0, 10, 20, 30});
  CHECK(sequential_windows(tokens, 30, 10).batch == 3);  // (100 − 1) / 30 windows fit
  CHECK_THROWS_AS(sequential_windows(tokens, 100, 1), ConfigError);
}

TEST_CASE("named substreams are independent") {
  Rng a = Rng::substream(42, "data"), b = Rng::substream(42, "init"), c = Rng::substream(42, "data");
  const auto x = a.engine()(), y = b.engine()(), z = c.engine()();
  CHECK(x == z);
  CHECK(x != y);
  CHECK(Rng::substream(43, "data").engine()() != x);
}
