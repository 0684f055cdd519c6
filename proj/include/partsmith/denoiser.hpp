// Copyright (C) 2026 The partsmith Authors
// SPDX-License-Identifier: Apache-2.0

#pragma once

#include <cmath>
#include <cstdint>
#include <memory>
#include <numbers>
#include <string>
#include <vector>

#include <nlohmann/json.hpp>

#include "partsmith/autodiff.hpp"
#include "partsmith/error.hpp"
#include "partsmith/image.hpp"
#include "partsmith/losses.hpp"
#include "partsmith/matrix.hpp"
#include "partsmith/rng.hpp"
#include "partsmith/token_space.hpp"

namespace partsmith {

/// DDPM linear beta schedule.
struct NoiseSchedule {
  std::vector<double> betas;
  std::vector<double> alpha_bar;

  static NoiseSchedule linear(std::size_t steps = 1000, double beta_start = 1e-4,
                              double beta_end = 0.02) {
    NoiseSchedule s;
    double prod = 1.0;
    for (std::size_t i = 0; i < steps; ++i) {
      const double b = beta_start + (beta_end - beta_start) * static_cast<double>(i) /
                                        static_cast<double>(steps - 1);
      s.betas.push_back(b);
      prod *= 1.0 - b;
      s.alpha_bar.push_back(prod);
    }
    return s;
  }

  std::size_t steps() const { return betas.size(); }
};

/// z_t = sqrt(alpha_bar) z_0 + sqrt(1 - alpha_bar) eps
inline Matrix add_noise(const NoiseSchedule& s, const Matrix& z0, const Matrix& eps, std::size_t t) {
  Matrix z = z0;
  const double a = std::sqrt(s.alpha_bar[t]);
  const double b = std::sqrt(1.0 - s.alpha_bar[t]);
  for (std::size_t i = 0; i < z.data.size(); ++i) z.data[i] = a * z0.data[i] + b * eps.data[i];
  return z;
}

inline std::vector<double> timestep_embedding(std::size_t t, std::size_t dim) {
  std::vector<double> e(dim);
  const std::size_t half = dim / 2;
  for (std::size_t i = 0; i < half; ++i) {
    const double freq = std::exp(-std::log(10000.0) * static_cast<double>(i) / static_cast<double>(half));
    e[i] = std::sin(static_cast<double>(t) * freq);
    e[half + i] = std::cos(static_cast<double>(t) * freq);
  }
  return e;
}

/// Fixed patchwise linear pixel <-> latent map. Per patch, with x = 2v - 1:
///   z_c = mean x_c (c = 0..2),  z_3 = mean_top(lum) - mean_bottom(lum).
/// decode(encode(.)) is a right inverse: encode(decode(z)) == z.
class PatchAutoencoder {
 public:
  static constexpr std::size_t kChannels = 4;

  explicit PatchAutoencoder(std::size_t patch = 4) : patch_(patch) {
    require(patch >= 2 && patch % 2 == 0, ErrorKind::validation, "autoencoder patch must be even");
  }

  std::size_t patch() const { return patch_; }

  /// Latent as kChannels x (grid_h*grid_w).
  Matrix encode(const RgbImage& img) const {
    const std::size_t gh = img.height / patch_, gw = img.width / patch_;
    Matrix z(kChannels, gh * gw);
    const double inv = 1.0 / static_cast<double>(patch_ * patch_);
    const double inv_half = 2.0 * inv;
    for (std::size_t gy = 0; gy < gh; ++gy)
      for (std::size_t gx = 0; gx < gw; ++gx) {
        double mean[3] = {0, 0, 0}, top = 0.0, bottom = 0.0;
        for (std::size_t y = 0; y < patch_; ++y)
          for (std::size_t x = 0; x < patch_; ++x) {
            double lum = 0.0;
            for (std::size_t c = 0; c < 3; ++c) {
              const double v = 2.0 * img.at(gy * patch_ + y, gx * patch_ + x, c) - 1.0;
              mean[c] += v;
              lum += v / 3.0;
            }
            (y < patch_ / 2 ? top : bottom) += lum;
          }
        const std::size_t cell = gy * gw + gx;
        for (std::size_t c = 0; c < 3; ++c) z(c, cell) = mean[c] * inv;
        z(3, cell) = (top - bottom) * inv_half;
      }
    return z;
  }

  RgbImage decode(const Matrix& z, std::size_t grid_h, std::size_t grid_w) const {
    require(z.rows == kChannels && z.cols == grid_h * grid_w, ErrorKind::validation,
            "latent shape does not match the autoencoder grid");
    RgbImage img(grid_w * patch_, grid_h * patch_);
    for (std::size_t gy = 0; gy < grid_h; ++gy)
      for (std::size_t gx = 0; gx < grid_w; ++gx) {
        const std::size_t cell = gy * grid_w + gx;
        for (std::size_t y = 0; y < patch_; ++y)
          for (std::size_t x = 0; x < patch_; ++x) {
            const double s = y < patch_ / 2 ? 0.5 : -0.5;
            for (std::size_t c = 0; c < 3; ++c) {
              const double xv = z(c, cell) + s * z(3, cell);
              img.at(gy * patch_ + y, gx * patch_ + x, c) = static_cast<float>((xv + 1.0) / 2.0);
            }
          }
      }
    return img;
  }

 private:
  std::size_t patch_;
};

inline Matrix flip_latent_horizontal(const Matrix& z, std::size_t grid_h, std::size_t grid_w) {
  Matrix out = z;
  for (std::size_t c = 0; c < z.rows; ++c)
    for (std::size_t r = 0; r < grid_h; ++r)
      for (std::size_t x = 0; x < grid_w; ++x)
        out(c, r * grid_w + x) = z(c, r * grid_w + (grid_w - 1 - x));
  return out;
}

struct BackendCapabilities {
  int protocol_version = 1;
  std::size_t latent_channels = 4;
  std::size_t latent_h = 16;
  std::size_t latent_w = 16;
  std::size_t attn_h = 16;
  std::size_t attn_w = 16;
  std::size_t embed_dim = 16;
  std::vector<std::string> attention_taps;
  bool cross_attention = true;
};

inline void to_json(nlohmann::json& j, const BackendCapabilities& c) {
  j = {{"protocol_version", c.protocol_version}, {"latent_channels", c.latent_channels},
       {"latent_h", c.latent_h}, {"latent_w", c.latent_w}, {"attn_h", c.attn_h},
       {"attn_w", c.attn_w}, {"embed_dim", c.embed_dim}, {"attention_taps", c.attention_taps},
       {"cross_attention", c.cross_attention}};
}

inline void from_json(const nlohmann::json& j, BackendCapabilities& c) {
  c.protocol_version = j.value("protocol_version", 1);
  j.at("latent_channels").get_to(c.latent_channels);
  j.at("latent_h").get_to(c.latent_h);
  j.at("latent_w").get_to(c.latent_w);
  j.at("attn_h").get_to(c.attn_h);
  j.at("attn_w").get_to(c.attn_w);
  j.at("embed_dim").get_to(c.embed_dim);
  c.attention_taps = j.value("attention_taps", std::vector<std::string>{});
  c.cross_attention = j.value("cross_attention", true);
}

struct NoisePrediction {
  Matrix eps;  // latent_channels x (latent_h*latent_w)
  AttentionStack attention;
};

/// Conditioning passed to a backend: the assembled prompt plus the channel count (M+1).
struct Conditioning {
  PromptEmbedding prompt;
  std::size_t channels = 0;
};

class DenoiserBackend {
 public:
  virtual ~DenoiserBackend() = default;
  virtual BackendCapabilities capabilities() const = 0;
  virtual NoisePrediction predict_noise(const Matrix& z_t, std::size_t t, const Conditioning& cond) = 0;
};

/// Low-rank pair for one projection: W + (alpha / r) * down * up.
struct LoraPair {
  ad::Param down;  // d_in x r
  ad::Param up;    // r x d_out
};

struct ToyDenoiserConfig {
  std::size_t latent_channels = 4;
  std::size_t grid = 16;
  std::size_t width = 32;
  std::size_t attn_dim = 16;
  std::size_t embed_dim = 16;
  std::size_t blocks = 3;
  std::size_t time_dim = 32;
  std::size_t mlp_hidden = 64;
  double cross_attn_gain = 1.0;  // fixed scale on the attention readout before W_o
  bool context_norm = false;     // RMS-normalise prompt tokens before K/V
  std::uint64_t seed = 0;
  std::size_t pretrain_steps = 0;  // captioned denoising steps applied to the base before freezing

  bool operator==(const ToyDenoiserConfig&) const = default;
};

inline void to_json(nlohmann::json& j, const ToyDenoiserConfig& c) {
  j = {{"latent_channels", c.latent_channels}, {"grid", c.grid}, {"width", c.width},
       {"attn_dim", c.attn_dim}, {"embed_dim", c.embed_dim}, {"blocks", c.blocks},
       {"time_dim", c.time_dim}, {"mlp_hidden", c.mlp_hidden}, {"cross_attn_gain", c.cross_attn_gain}, {"context_norm", c.context_norm}, {"seed", c.seed},
       {"pretrain_steps", c.pretrain_steps}};
}

/// Keys missing from `j` keep their current values in `c`.
inline void from_json(const nlohmann::json& j, ToyDenoiserConfig& c) {
  const ToyDenoiserConfig d = c;
  c.latent_channels = j.value("latent_channels", d.latent_channels);
  c.grid = j.value("grid", d.grid);
  c.width = j.value("width", d.width);
  c.attn_dim = j.value("attn_dim", d.attn_dim);
  c.embed_dim = j.value("embed_dim", d.embed_dim);
  c.blocks = j.value("blocks", d.blocks);
  c.time_dim = j.value("time_dim", d.time_dim);
  c.mlp_hidden = j.value("mlp_hidden", d.mlp_hidden);
  c.cross_attn_gain = j.value("cross_attn_gain", d.cross_attn_gain);
  c.context_norm = j.value("context_norm", d.context_norm);
  c.seed = j.value("seed", d.seed);
  c.pretrain_steps = j.value("pretrain_steps", d.pretrain_steps);
}

/// Desk-scale cross-attention denoiser over a grid x grid latent. Every block is
///   h += softmax(q k^T / sqrt(a)) v W_o + b_o,   h += relu(h W1 + b1) W2 + b2
/// with q = h W_q, k = c W_k, v = c W_v over the prompt tokens c. Output:
///   eps = sqrt(1 - alpha_bar_t) z_t + h W_out + b_out.
/// Base weights come from a seeded initialisation (optionally pretrained, see
/// pretrain.hpp) and are always frozen.
class ToyDenoiser final : public DenoiserBackend {
 public:
  struct Block {
    ad::Param wq, wk, wv, wo, bo, w1, b1, w2, b2;
  };

  struct Graph {
    ad::Var eps;                     // cells x latent_channels
    std::vector<ad::Var> attention;  // per block: cells x tokens
  };

  explicit ToyDenoiser(ToyDenoiserConfig cfg = {})
      : cfg_(cfg), schedule_(NoiseSchedule::linear()) {
    Rng rng(cfg.seed ^ 0x746F79ull);
    auto init = [&](std::string name, std::size_t r, std::size_t c) {
      const double bound = 1.0 / std::sqrt(static_cast<double>(r));
      Matrix m(r, c);
      for (double& v : m.data) v = (2.0 * rng.uniform() - 1.0) * bound;
      return ad::Param(std::move(name), std::move(m), false);
    };
    auto zeros = [](std::string name, std::size_t c) {
      return ad::Param(std::move(name), Matrix(1, c), false);
    };
    const std::size_t d = cfg.width;
    w_in_ = init("in.w", cfg.latent_channels, d);
    b_in_ = zeros("in.b", d);
    w_time_ = init("time.w", cfg.time_dim, d);
    for (std::size_t l = 0; l < cfg.blocks; ++l) {
      const std::string p = "blocks." + std::to_string(l) + ".";
      blocks_.push_back({init(p + "attn.q", d, cfg.attn_dim), init(p + "attn.k", cfg.embed_dim, cfg.attn_dim),
                         init(p + "attn.v", cfg.embed_dim, d), init(p + "attn.out", d, d),
                         zeros(p + "attn.out_bias", d), init(p + "mlp.w1", d, cfg.mlp_hidden),
                         zeros(p + "mlp.b1", cfg.mlp_hidden), init(p + "mlp.w2", cfg.mlp_hidden, d),
                         zeros(p + "mlp.b2", d)});
    }
    w_out_ = init("out.w", d, cfg.latent_channels);
    b_out_ = zeros("out.b", cfg.latent_channels);
    positions_ = Matrix(cells(), d);
    const std::size_t quarter = d / 4;
    for (std::size_t r = 0; r < cfg.grid; ++r)
      for (std::size_t c = 0; c < cfg.grid; ++c)
        for (std::size_t i = 0; i < quarter; ++i) {
          const double freq = std::pow(cfg.grid, -static_cast<double>(i) / static_cast<double>(quarter)) *
                              std::numbers::pi;
          const std::size_t cell = r * cfg.grid + c;
          positions_(cell, i) = std::sin(r * freq);
          positions_(cell, quarter + i) = std::cos(r * freq);
          positions_(cell, 2 * quarter + i) = std::sin(c * freq);
          positions_(cell, 3 * quarter + i) = std::cos(c * freq);
        }
  }

  const ToyDenoiserConfig& config() const { return cfg_; }
  const NoiseSchedule& schedule() const { return schedule_; }
  std::size_t cells() const { return cfg_.grid * cfg_.grid; }

  BackendCapabilities capabilities() const override {
    BackendCapabilities caps;
    caps.latent_channels = cfg_.latent_channels;
    caps.latent_h = caps.latent_w = cfg_.grid;
    caps.attn_h = caps.attn_w = cfg_.grid;
    caps.embed_dim = cfg_.embed_dim;
    for (std::size_t l = 0; l < cfg_.blocks; ++l)
      caps.attention_taps.push_back("blocks." + std::to_string(l) + ".cross_attn");
    return caps;
  }

  // ---- LoRA ---------------------------------------------------------------------

  bool has_lora() const { return !lora_.empty(); }
  std::size_t lora_rank() const { return lora_rank_; }
  double lora_alpha() const { return lora_alpha_; }

  /// Attaches zero-initialised-up adapters to Q, K, V and out of every block.
  void attach_lora(std::size_t rank, double alpha, Rng& rng) {
    require(rank >= 1, ErrorKind::validation, "LoRA rank must be positive");
    lora_rank_ = rank;
    lora_alpha_ = alpha;
    lora_.clear();
    for (std::size_t l = 0; l < blocks_.size(); ++l) {
      auto& b = blocks_[l];
      std::array<ad::Param*, 4> targets = {&b.wq, &b.wk, &b.wv, &b.wo};
      std::vector<LoraPair> pairs;
      for (ad::Param* w : targets) {
        const std::size_t din = w->value.rows, dout = w->value.cols;
        Matrix down(din, rank);
        const double bound = 1.0 / std::sqrt(static_cast<double>(din));
        for (double& v : down.data) v = (2.0 * rng.uniform() - 1.0) * bound;
        pairs.push_back({ad::Param(w->name + ".lora_down", std::move(down)),
                         ad::Param(w->name + ".lora_up", Matrix(rank, dout))});
      }
      lora_.push_back(std::move(pairs));
    }
  }

  std::vector<ad::Param*> lora_params() {
    std::vector<ad::Param*> out;
    for (auto& block : lora_)
      for (auto& p : block) {
        out.push_back(&p.down);
        out.push_back(&p.up);
      }
    return out;
  }

  std::vector<ad::Param*> base_params() {
    std::vector<ad::Param*> out = {&w_in_, &b_in_, &w_time_};
    for (auto& b : blocks_)
      for (ad::Param* p : {&b.wq, &b.wk, &b.wv, &b.wo, &b.bo, &b.w1, &b.b1, &b.w2, &b.b2}) out.push_back(p);
    out.push_back(&w_out_);
    out.push_back(&b_out_);
    return out;
  }

  std::size_t base_parameter_count() {
    std::size_t n = 0;
    for (ad::Param* p : base_params()) n += p->value.size();
    return n;
  }

  // ---- forward -----------------------------------------------------------------

  /// Differentiable forward. `z_t` is latent_channels x cells; `context` is tokens x embed_dim.
  Graph forward(ad::Tape& tape, const Matrix& z_t, std::size_t t, ad::Var context) {
    require(z_t.rows == cfg_.latent_channels && z_t.cols == cells(), ErrorKind::validation,
            "latent shape does not match the toy denoiser");
    require(t < schedule_.steps(), ErrorKind::validation, "timestep out of range");
    require(tape.value(context).cols == cfg_.embed_dim, ErrorKind::validation,
            "prompt embedding width does not match the toy denoiser");
    Matrix tokens(cells(), cfg_.latent_channels);
    for (std::size_t c = 0; c < cfg_.latent_channels; ++c)
      for (std::size_t i = 0; i < cells(); ++i) tokens(i, c) = z_t(c, i);
    const auto temb = timestep_embedding(t, cfg_.time_dim);

    ad::Var h = tape.add_row(tape.matmul(tape.constant(tokens), tape.param(w_in_)), tape.param(b_in_));
    h = tape.add(h, tape.constant(positions_));
    h = tape.add_row(h, tape.matmul(tape.constant(Matrix(1, cfg_.time_dim, temb)), tape.param(w_time_)));

    if (cfg_.context_norm) context = tape.rms_norm_rows(context);
    Graph g;
    const double inv_sqrt = 1.0 / std::sqrt(static_cast<double>(cfg_.attn_dim));
    for (std::size_t l = 0; l < blocks_.size(); ++l) {
      auto& b = blocks_[l];
      ad::Var q = project(tape, h, b.wq, l, 0);
      ad::Var k = project(tape, context, b.wk, l, 1);
      ad::Var v = project(tape, context, b.wv, l, 2);
      ad::Var attn = tape.softmax_rows(tape.scale(tape.matmul_bt(q, k), inv_sqrt));
      g.attention.push_back(attn);
      ad::Var read = tape.matmul(attn, v);
      if (cfg_.cross_attn_gain != 1.0) read = tape.scale(read, cfg_.cross_attn_gain);
      ad::Var mixed = tape.add_row(project(tape, read, b.wo, l, 3), tape.param(b.bo));
      h = tape.add(h, mixed);
      ad::Var hidden = tape.relu(tape.add_row(tape.matmul(h, tape.param(b.w1)), tape.param(b.b1)));
      h = tape.add(h, tape.add_row(tape.matmul(hidden, tape.param(b.w2)), tape.param(b.b2)));
    }
    ad::Var out = tape.add_row(tape.matmul(h, tape.param(w_out_)), tape.param(b_out_));
    const double skip = std::sqrt(1.0 - schedule_.alpha_bar[t]);
    Matrix skip_tokens = tokens;
    for (double& x : skip_tokens.data) x *= skip;
    g.eps = tape.add(out, tape.constant(std::move(skip_tokens)));
    return g;
  }

  NoisePrediction predict_noise(const Matrix& z_t, std::size_t t, const Conditioning& cond) override {
    ad::Tape tape;
    Graph g = forward(tape, z_t, t, tape.constant(cond.prompt.token_vectors));
    NoisePrediction out;
    out.eps = tokens_to_latent(tape.value(g.eps));
    out.attention = gather_attention(tape, g, cond.prompt.positions, cond.prompt.channel_of_position,
                                     cond.channels);
    return out;
  }

  Matrix tokens_to_latent(const Matrix& tokens) const {
    Matrix z(cfg_.latent_channels, cells());
    for (std::size_t i = 0; i < cells(); ++i)
      for (std::size_t c = 0; c < cfg_.latent_channels; ++c) z(c, i) = tokens(i, c);
    return z;
  }

  AttentionStack gather_attention(const ad::Tape& tape, const Graph& g,
                                  const std::vector<std::size_t>& positions,
                                  const std::vector<std::size_t>& channel_of_position,
                                  std::size_t channels) const {
    AttentionStack s(g.attention.size(), channels, cfg_.grid, cfg_.grid);
    for (std::size_t j = 0; j < positions.size(); ++j) {
      const std::size_t m = channel_of_position[j];
      require(m < channels, ErrorKind::validation, "pseudo-token channel out of range");
      s.present[m] = true;
      for (std::size_t l = 0; l < g.attention.size(); ++l) {
        const Matrix& A = tape.value(g.attention[l]);
        for (std::size_t i = 0; i < cells(); ++i) s.at(l, m, i) = A(i, positions[j]);
      }
    }
    return s;
  }

 private:
  // x W (+ (alpha / r) (x D) U when adapters are attached)
  ad::Var project(ad::Tape& tape, ad::Var x, ad::Param& w, std::size_t block, std::size_t slot) {
    ad::Var y = tape.matmul(x, tape.param(w));
    if (lora_.empty()) return y;
    LoraPair& p = lora_[block][slot];
    ad::Var delta = tape.matmul(tape.matmul(x, tape.param(p.down)), tape.param(p.up));
    return tape.add(y, tape.scale(delta, lora_alpha_ / static_cast<double>(lora_rank_)));
  }

  ToyDenoiserConfig cfg_;
  NoiseSchedule schedule_;
  ad::Param w_in_, b_in_, w_time_, w_out_, b_out_;
  std::vector<Block> blocks_;
  Matrix positions_;
  std::vector<std::vector<LoraPair>> lora_;
  std::size_t lora_rank_ = 0;
  double lora_alpha_ = 0.0;
};

inline constexpr std::size_t kDefaultLoraRank = 4;
inline constexpr double kDefaultLoraAlpha = 4.0;

}  // namespace partsmith
