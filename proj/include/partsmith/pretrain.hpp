// Copyright (C) 2026 The partsmith Authors
// SPDX-License-Identifier: Apache-2.0

#pragma once

// A stand-in for a pretrained text-to-image model. The toy denoiser is fitted to
// captioned renders of a fixed synthetic creature corpus ("a photo of a navy yellow
// cyan"), after which its weights are frozen. Personalization then only touches the
// pseudo-tokens, the projector and the LoRA adapters, as it would on a real model.

#include <cmath>
#include <map>
#include <mutex>
#include <string>
#include <vector>

#include "partsmith/checksum.hpp"
#include "partsmith/denoiser.hpp"
#include "partsmith/discovery.hpp"
#include "partsmith/error.hpp"
#include "partsmith/losses.hpp"
#include "partsmith/rng.hpp"
#include "partsmith/token_space.hpp"
#include "partsmith/toy_task.hpp"

namespace partsmith {

struct PretrainOptions {
  std::size_t corpus_size = 64;
  std::uint64_t corpus_seed = 7;
  std::size_t batch_size = 4;
  double lr = 3e-3;
};

inline std::string toy_caption(const toy::Creature& c) {
  static const char* bg[] = {"navy", "brown"};
  static const char* head[] = {"yellow", "orange"};
  static const char* body[] = {"cyan", "blue"};
  return kDefaultTemplate + " " + bg[c.background] + " " + head[c.head] + " " + body[c.body];
}

/// Runs `steps` Adam updates of every base weight on the captioned corpus. The net
/// must match the toy image geometry (64 px renders, 4 px patches, 16 x 16 grid).
inline void pretrain_base(ToyDenoiser& net, const WordEmbedder& words, std::size_t steps,
                          const PretrainOptions& opts = {}) {
  require(net.config().grid == toy::kGrid, ErrorKind::validation,
          "base pretraining needs a " + std::to_string(toy::kGrid) + "x" + std::to_string(toy::kGrid) +
              " denoiser grid");
  const PatchAutoencoder vae(toy::kPatch);
  std::vector<Matrix> latents, captions;
  for (const auto& c : toy::creatures(opts.corpus_size, opts.corpus_seed)) {
    latents.push_back(vae.encode(toy::render(c)));
    captions.push_back(words.embed_words(split_words(toy_caption(c))));
  }
  require(latents.front().rows == net.config().latent_channels, ErrorKind::validation,
          "base pretraining needs the patch autoencoder's latent width");

  auto params = net.base_params();
  for (ad::Param* p : params) p->trainable = true;
  std::vector<Matrix> m, v;
  for (ad::Param* p : params) {
    m.emplace_back(p->value.rows, p->value.cols);
    v.emplace_back(p->value.rows, p->value.cols);
  }
  constexpr double b1 = 0.9, b2 = 0.999, adam_eps = 1e-8;
  Rng rng(net.config().seed ^ 0x707265ull);
  const double w = 1.0 / static_cast<double>(opts.batch_size);
  for (std::size_t step = 1; step <= steps; ++step) {
    for (ad::Param* p : params) p->zero_grad();
    for (std::size_t b = 0; b < opts.batch_size; ++b) {
      const std::size_t i = rng.below(latents.size());
      const std::size_t t = rng.below(net.schedule().steps());
      Matrix noise(latents[i].rows, latents[i].cols);
      for (double& x : noise.data) x = rng.normal();
      ad::Tape tape;
      const auto g = net.forward(tape, add_noise(net.schedule(), latents[i], noise, t), t,
                                 tape.constant(captions[i]));
      Matrix target(net.cells(), noise.rows);
      for (std::size_t c = 0; c < target.cols; ++c)
        for (std::size_t k = 0; k < target.rows; ++k) target(k, c) = noise(c, k);
      const ad::Var eps = g.eps;
      const double l = diffusion_loss(target.data, tape.value(eps).data);
      ad::Var loss = tape.custom(Matrix(1, 1, {l}), {eps}, [eps, target](ad::Tape& tp, std::size_t self) {
        Matrix d(target.rows, target.cols, diffusion_loss_backward(target.data, tp.value(eps).data));
        for (double& x : d.data) x *= tp.grad_of(self).data[0];
        tp.accumulate(eps, d);
      });
      tape.backward(loss, w);
    }
    const double bc1 = 1.0 - std::pow(b1, static_cast<double>(step));
    const double bc2 = 1.0 - std::pow(b2, static_cast<double>(step));
    for (std::size_t i = 0; i < params.size(); ++i) {
      auto& x = params[i]->value.data;
      const auto& g = params[i]->grad.data;
      for (std::size_t k = 0; k < x.size(); ++k) {
        m[i].data[k] = b1 * m[i].data[k] + (1.0 - b1) * g[k];
        v[i].data[k] = b2 * v[i].data[k] + (1.0 - b2) * g[k] * g[k];
        x[k] -= opts.lr * (m[i].data[k] / bc1) / (std::sqrt(v[i].data[k] / bc2) + adam_eps);
      }
    }
  }
  for (ad::Param* p : params) {
    p->trainable = false;
    p->zero_grad();
    detail::round_to_float(p->value);  // stored as float32 next to checkpoints
  }
}

namespace detail {

struct BaseCache {
  std::mutex mu;
  std::map<std::string, std::vector<Matrix>> weights;
};

inline BaseCache& base_cache() {
  static BaseCache cache;
  return cache;
}

inline std::string base_key(const ToyDenoiserConfig& cfg) { return nlohmann::json(cfg).dump(); }

}  // namespace detail

inline std::vector<Matrix> base_values(ToyDenoiser& net) {
  std::vector<Matrix> out;
  for (ad::Param* p : net.base_params()) out.push_back(p->value);
  return out;
}

inline void set_base_values(ToyDenoiser& net, const std::vector<Matrix>& values) {
  auto params = net.base_params();
  require(values.size() == params.size(), ErrorKind::validation, "base weight count mismatch");
  for (std::size_t i = 0; i < params.size(); ++i) {
    require(values[i].rows == params[i]->value.rows && values[i].cols == params[i]->value.cols,
            ErrorKind::validation, "base weight shape mismatch for " + params[i]->name);
    params[i]->value = values[i];
  }
}

/// SHA-256 over the base weights in declaration order.
inline std::string base_checksum(ToyDenoiser& net) {
  std::string blob;
  for (ad::Param* p : net.base_params())
    blob.append(reinterpret_cast<const char*>(p->value.data.data()), p->value.data.size() * sizeof(double));
  return sha256_hex(blob);
}

/// Makes pretrained weights for `cfg` available without recomputing them, e.g. when
/// they were stored next to a checkpoint.
inline void register_base(const ToyDenoiserConfig& cfg, std::vector<Matrix> values) {
  auto& cache = detail::base_cache();
  std::lock_guard<std::mutex> lock(cache.mu);
  cache.weights[detail::base_key(cfg)] = std::move(values);
}

/// The frozen base for `cfg`. Pretraining runs once per distinct configuration per
/// process; later calls copy the cached weights.
inline ToyDenoiser make_base(const ToyDenoiserConfig& cfg) {
  ToyDenoiser net(cfg);
  if (cfg.pretrain_steps == 0) return net;
  auto& cache = detail::base_cache();
  std::lock_guard<std::mutex> lock(cache.mu);
  const std::string key = detail::base_key(cfg);
  auto it = cache.weights.find(key);
  if (it == cache.weights.end()) {
    pretrain_base(net, WordEmbedder(cfg.embed_dim, cfg.seed), cfg.pretrain_steps);
    it = cache.weights.emplace(key, base_values(net)).first;
  } else {
    set_base_values(net, it->second);
  }
  return net;
}

}  // namespace partsmith
