// Copyright (C) 2026 The partsmith Authors
// SPDX-License-Identifier: Apache-2.0

#pragma once

#include <cmath>
#include <cstdint>
#include <sstream>
#include <string>
#include <vector>

#include "partsmith/autodiff.hpp"
#include "partsmith/discovery.hpp"
#include "partsmith/error.hpp"
#include "partsmith/feature_io.hpp"
#include "partsmith/rng.hpp"

namespace partsmith {

/// Frozen word-embedding table of the toy text encoder. Each word maps to a fixed
/// pseudo-random vector derived from its spelling.
class WordEmbedder {
 public:
  explicit WordEmbedder(std::size_t embed_dim = 16, std::uint64_t seed = 0)
      : dim_(embed_dim), seed_(seed) {}

  std::size_t dim() const { return dim_; }
  std::uint64_t seed() const { return seed_; }

  std::vector<double> embed(const std::string& word) const {
    std::uint64_t h = 0xcbf29ce484222325ull;  // FNV-1a
    for (unsigned char c : word) {
      h ^= c;
      h *= 0x100000001b3ull;
    }
    Rng rng(h ^ detail::splitmix64(seed_));
    std::vector<double> v(dim_);
    for (double& x : v) x = rng.normal();
    return v;
  }

  Matrix embed_words(const std::vector<std::string>& words) const {
    Matrix out(words.size(), dim_);
    for (std::size_t i = 0; i < words.size(); ++i) {
      const auto v = embed(words[i]);
      std::copy(v.begin(), v.end(), out.row(i).begin());
    }
    return out;
  }

  /// Mean embedding over a small reference vocabulary.
  std::vector<double> mean_embedding() const {
    static const char* kVocabulary[] = {"a",    "photo",  "of",    "the",  "bird", "dog",
                                        "head", "wing",   "body",  "tail", "leg",  "background",
                                        "in",   "pencil", "drawing", "painting"};
    std::vector<double> mean(dim_, 0.0);
    for (const char* w : kVocabulary) {
      const auto v = embed(w);
      for (std::size_t d = 0; d < dim_; ++d) mean[d] += v[d];
    }
    for (double& m : mean) m /= static_cast<double>(std::size(kVocabulary));
    return mean;
  }

 private:
  std::size_t dim_;
  std::uint64_t seed_;
};

inline std::vector<std::string> split_words(const std::string& text) {
  std::istringstream in(text);
  std::vector<std::string> words;
  for (std::string w; in >> w;) words.push_back(w);
  return words;
}

inline const std::string kDefaultTemplate = "a photo of a";

/// Learnable (M+1)*K x D_e embedding table, one row per (channel, split).
struct TokenDictionary {
  std::size_t M = 0;
  std::size_t K = 0;
  ad::Param table;

  std::size_t embed_dim() const { return table.value.cols; }
  std::size_t num_tokens() const { return (M + 1) * K; }
  std::size_t index(std::size_t m, std::size_t k) const { return m * K + (k - 1); }

  /// Rows start at the word-embedding mean plus N(0, noise^2) jitter.
  static TokenDictionary create(std::size_t M, std::size_t K, const WordEmbedder& words, Rng& rng,
                                double noise = 0.05) {
    TokenDictionary d{M, K, {"token_table", Matrix((M + 1) * K, words.dim())}};
    const auto mean = words.mean_embedding();
    for (std::size_t r = 0; r < d.num_tokens(); ++r)
      for (std::size_t c = 0; c < words.dim(); ++c) d.table.value(r, c) = mean[c] + noise * rng.normal();
    return d;
  }
};

/// Two affine layers with a ReLU between them, or the identity map in pass-through mode.
struct Projector {
  bool identity = false;
  ad::Param w1, b1, w2, b2;

  std::size_t hidden() const { return w1.value.cols; }

  static Projector create(std::size_t embed_dim, std::size_t hidden, Rng& rng) {
    auto uniform = [&](std::size_t r, std::size_t c) {
      const double bound = 1.0 / std::sqrt(static_cast<double>(r));
      Matrix m(r, c);
      for (double& v : m.data) v = (2.0 * rng.uniform() - 1.0) * bound;
      return m;
    };
    Projector p;
    p.w1 = {"projector.w1", uniform(embed_dim, hidden)};
    p.b1 = {"projector.b1", Matrix(1, hidden)};
    p.w2 = {"projector.w2", uniform(hidden, embed_dim)};
    p.b2 = {"projector.b2", Matrix(1, embed_dim)};
    return p;
  }

  static Projector pass_through() {
    Projector p;
    p.identity = true;
    return p;
  }

  std::vector<ad::Param*> params() {
    if (identity) return {};
    return {&w1, &b1, &w2, &b2};
  }

  ad::Var forward(ad::Tape& tape, ad::Var x) {
    if (identity) return x;
    ad::Var h = tape.relu(tape.add_row(tape.matmul(x, tape.param(w1)), tape.param(b1)));
    return tape.add_row(tape.matmul(h, tape.param(w2)), tape.param(b2));
  }
};

/// Token sequence fed to cross-attention: template words, one pseudo-token per present
/// channel (channel order), then optional free-text suffix words.
struct PromptEmbedding {
  Matrix token_vectors;
  std::vector<std::size_t> positions;           // row of each pseudo-token
  std::vector<std::size_t> channel_of_position;  // its channel
};

struct PromptGraph {
  ad::Var context;
  std::vector<std::size_t> positions;
  std::vector<std::size_t> channel_of_position;
};

inline void check_code(const PromptCode& code, const TokenDictionary& dict) {
  validate(code, dict.M, dict.K);
  require(code.present_count() >= 1, ErrorKind::validation, "prompt code has no present channel");
}

/// Differentiable prompt assembly: y_p = proj(e[index(m, k)]) per present pair.
inline PromptGraph build_prompt(ad::Tape& tape, const PromptCode& code, TokenDictionary& dict,
                                Projector& proj, const Matrix& template_vectors,
                                const Matrix& suffix_vectors = {}) {
  check_code(code, dict);
  std::vector<std::size_t> rows;
  PromptGraph g;
  for (const auto& p : code.pairs) {
    if (!p.present) continue;
    rows.push_back(dict.index(p.channel, p.split));
    g.positions.push_back(template_vectors.rows + g.channel_of_position.size());
    g.channel_of_position.push_back(p.channel);
  }
  ad::Var pseudo = proj.forward(tape, tape.gather_rows(tape.param(dict.table), rows));
  g.context = template_vectors.rows > 0
                  ? tape.concat_rows(tape.constant(template_vectors), pseudo)
                  : pseudo;
  if (suffix_vectors.rows > 0) g.context = tape.concat_rows(g.context, tape.constant(suffix_vectors));
  return g;
}

inline PromptEmbedding embed_code(const PromptCode& code, TokenDictionary& dict, Projector& proj,
                                  const Matrix& template_vectors, const Matrix& suffix_vectors = {}) {
  ad::Tape tape;
  PromptGraph g = build_prompt(tape, code, dict, proj, template_vectors, suffix_vectors);
  return {tape.value(g.context), g.positions, g.channel_of_position};
}

/// The conventional inversion design: pseudo-vectors are the raw dictionary rows.
inline PromptEmbedding identity_baseline(const PromptCode& code, TokenDictionary& dict,
                                         const Matrix& template_vectors) {
  Projector identity = Projector::pass_through();
  return embed_code(code, dict, identity, template_vectors);
}

}  // namespace partsmith
