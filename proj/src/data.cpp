// SPDX-License-Identifier: Apache-2.0
#include "moelab/data.hpp"

#include <openssl/evp.h>

#include <algorithm>
#include <cmath>
#include <fstream>
#include <iterator>
#include <sstream>

#include "moelab/errors.hpp"

namespace moelab {

std::vector<int> tokenize(std::string_view text) {
  std::vector<int> out(text.size());
  for (std::size_t i = 0; i < text.size(); ++i) out[i] = static_cast<unsigned char>(text[i]);
  return out;
}

std::string detokenize(std::span<const int> tokens) {
  std::string out(tokens.size(), '\0');
  for (std::size_t i = 0; i < tokens.size(); ++i) {
    if (tokens[i] < 0 || tokens[i] >= static_cast<int>(kByteVocab)) throw InputError("token id is not a byte");
    out[i] = static_cast<char>(static_cast<unsigned char>(tokens[i]));
  }
  return out;
}

std::string sha256_hex(std::string_view bytes) {
  unsigned char md[EVP_MAX_MD_SIZE];
  unsigned int len = 0;
  if (EVP_Digest(bytes.data(), bytes.size(), md, &len, EVP_sha256(), nullptr) != 1) {
    throw Error("SHA-256 computation failed");
  }
  static constexpr char kHex[] = "0123456789abcdef";
  std::string out;
  for (unsigned int i = 0; i < len; ++i) {
    out.push_back(kHex[md[i] >> 4]);
    out.push_back(kHex[md[i] & 0xf]);
  }
  return out;
}

Corpus make_corpus(std::string_view text, double split_ratio, std::string source) {
  if (text.empty()) throw InputError("corpus " + source + " is empty");
  if (!(split_ratio > 0.0) || !(split_ratio < 1.0)) {
    throw ConfigError("validation split ratio must be in (0, 1); a validation split is required");
  }
  const auto tokens = tokenize(text);
  const auto n_val = static_cast<std::size_t>(std::floor(static_cast<double>(tokens.size()) * split_ratio));
  if (n_val == 0) throw ConfigError("validation split of " + source + " is empty");
  if (n_val >= tokens.size()) throw ConfigError("training split of " + source + " is empty");
  Corpus c;
  const auto cut = tokens.begin() + static_cast<std::ptrdiff_t>(tokens.size() - n_val);
  c.train_tokens.assign(tokens.begin(), cut);
  c.val_tokens.assign(cut, tokens.end());
  c.digest = sha256_hex(text);
  c.source = std::move(source);
  c.split_ratio = split_ratio;
  return c;
}

Corpus load_corpus(const std::filesystem::path& path, double split_ratio) {
  std::ifstream f(path, std::ios::binary);
  if (!f) throw InputError("cannot read corpus " + path.string());
  std::string text((std::istreambuf_iterator<char>(f)), std::istreambuf_iterator<char>());
  if (f.bad()) throw InputError("error while reading corpus " + path.string());
  return make_corpus(text, split_ratio, path.string());
}

Batch sample_batch(const Corpus& corpus, std::size_t batch_size, std::size_t seq_len, Rng& rng) {
  const auto& src = corpus.train_tokens;
  if (batch_size == 0 || seq_len == 0) throw ConfigError("batch size and sequence length must be positive");
  if (seq_len + 1 > src.size()) {
    throw ConfigError("training split (" + std::to_string(src.size()) + " tokens) is too short for seq_len " +
                      std::to_string(seq_len));
  }
  Batch b;
  b.batch = batch_size;
  b.seq = seq_len;
  b.inputs.reserve(batch_size * seq_len);
  b.targets.reserve(batch_size * seq_len);
  const std::size_t last_start = src.size() - seq_len - 1;
  for (std::size_t i = 0; i < batch_size; ++i) {
    const auto s = static_cast<std::size_t>(rng.uniform_int(0, last_start));
    b.starts.push_back(s);
    b.inputs.insert(b.inputs.end(), src.begin() + s, src.begin() + s + seq_len);
    b.targets.insert(b.targets.end(), src.begin() + s + 1, src.begin() + s + seq_len + 1);
  }
  return b;
}

Batch sequential_windows(std::span<const int> tokens, std::size_t seq_len, std::size_t max_windows) {
  if (seq_len == 0 || max_windows == 0) throw ConfigError("evaluation windows need positive length and count");
  if (tokens.size() < seq_len + 1) {
    throw ConfigError("evaluation split (" + std::to_string(tokens.size()) + " tokens) shorter than one window");
  }
  const std::size_t fit = (tokens.size() - 1) / seq_len;
  Batch b;
  b.batch = std::min(fit, max_windows);
  b.seq = seq_len;
  for (std::size_t w = 0; w < b.batch; ++w) {
    const std::size_t s = w * seq_len;
    b.starts.push_back(s);
    b.inputs.insert(b.inputs.end(), tokens.begin() + s, tokens.begin() + s + seq_len);
    b.targets.insert(b.targets.end(), tokens.begin() + s + 1, tokens.begin() + s + seq_len + 1);
  }
  return b;
}

}  // namespace moelab
