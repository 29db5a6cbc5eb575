// SPDX-License-Identifier: Apache-2.0
#pragma once

#include <cstddef>
#include <filesystem>
#include <span>
#include <string>
#include <string_view>
#include <vector>

#include "moelab/rng.hpp"

namespace moelab {

inline constexpr std::size_t kByteVocab = 256;

/// Byte-level tokens: one id in [0, 256) per byte.
std::vector<int> tokenize(std::string_view text);
std::string detokenize(std::span<const int> tokens);

/// Tokenized text with a contiguous tail held out for validation.
struct Corpus {
  std::vector<int> train_tokens;
  std::vector<int> val_tokens;
  std::size_t vocab_size = kByteVocab;
  std::string digest;  // SHA-256 of the raw bytes, lowercase hex
  std::string source;
  double split_ratio = 0.0;

  std::size_t total_tokens() const noexcept { return train_tokens.size() + val_tokens.size(); }
};

std::string sha256_hex(std::string_view bytes);

/// `split_ratio` is the validation fraction; it must leave both splits non-empty.
Corpus make_corpus(std::string_view text, double split_ratio, std::string source = "<memory>");
Corpus load_corpus(const std::filesystem::path& path, double split_ratio);

struct Batch {
  std::size_t batch = 0;
  std::size_t seq = 0;
  std::vector<int> inputs;   // batch·seq, row-major
  std::vector<int> targets;  // inputs shifted by one source position
  std::vector<std::size_t> starts;
};

/// Uniform random windows from the training split. Needs seq_len + 1 ≤ |train|.
Batch sample_batch(const Corpus& corpus, std::size_t batch_size, std::size_t seq_len, Rng& rng);

/// Consecutive non-overlapping windows from the start of `tokens`; at most
/// `max_windows`, at least one. Used for deterministic evaluation.
Batch sequential_windows(std::span<const int> tokens, std::size_t seq_len, std::size_t max_windows);

}  // namespace moelab
