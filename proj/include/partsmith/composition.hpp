// Copyright (C) 2026 The partsmith Authors
// SPDX-License-Identifier: Apache-2.0

#pragma once

#include <algorithm>
#include <cmath>
#include <numeric>
#include <string>
#include <vector>

#include <nlohmann/json.hpp>

#include "partsmith/denoiser.hpp"
#include "partsmith/discovery.hpp"
#include "partsmith/error.hpp"
#include "partsmith/model.hpp"
#include "partsmith/rng.hpp"

namespace partsmith {

struct Donor {
  PromptCode code;
  std::size_t channel = 0;
};

/// Replaces each donor's channel in `base` with the donor's pair at that channel.
inline PromptCode compose(const PromptCode& base, const std::vector<Donor>& donors) {
  PromptCode out = base;
  std::vector<bool> used(base.channels(), false);
  for (const auto& d : donors) {
    require(d.code.channels() == base.channels(), ErrorKind::validation,
            "donor code has " + std::to_string(d.code.channels()) + " channels, base has " +
                std::to_string(base.channels()));
    require(d.channel < base.channels(), ErrorKind::validation,
            "donor channel " + std::to_string(d.channel) + " out of range");
    require(d.code.pairs[d.channel].present, ErrorKind::validation,
            "donor channel " + std::to_string(d.channel) + " is absent in the donor code");
    require(!used[d.channel], ErrorKind::validation,
            "channel " + std::to_string(d.channel) + " is replaced twice");
    used[d.channel] = true;
    out.pairs[d.channel] = d.code.pairs[d.channel];
  }
  return out;
}

/// A tagged corpus image: the pool unit for composition suites.
struct TaggedCode {
  std::string image_id;
  PromptCode code;
};

struct SuiteItem {
  PromptCode input;
  std::size_t sources = 1;
  std::string base_id;
  PromptCode base_code;
  std::vector<std::string> donor_ids;
  std::vector<std::size_t> replaced_channels;  // pop order
};

struct SuiteOptions {
  std::size_t n = 500;
  std::size_t n_pool = 500;
  std::vector<std::size_t> sources_per_item = {1, 2, 3, 4};  // cycled over items
  std::uint64_t seed = 0;
};

inline constexpr std::size_t kMaxSources = 4;

/// Base and donor pools are disjoint random subsets of `corpus`. Each donor pops one
/// channel index without replacement and hands over its pair at that channel. Donors
/// within an item are distinct images that have the popped channel present.
inline std::vector<SuiteItem> sample_composition_suite(const std::vector<TaggedCode>& corpus,
                                                       const SuiteOptions& opts) {
  require(opts.n > 0 && opts.n_pool > 0, ErrorKind::validation, "suite and pool sizes must be positive");
  require(!opts.sources_per_item.empty(), ErrorKind::validation, "sources_per_item is empty");
  const bool need_donors = std::any_of(opts.sources_per_item.begin(), opts.sources_per_item.end(),
                                       [](std::size_t s) { return s > 1; });
  const std::size_t needed = need_donors ? 2 * opts.n_pool : opts.n_pool;
  if (corpus.size() < needed)
    fail(ErrorKind::capacity, "pools of " + std::to_string(opts.n_pool) + " need " + std::to_string(needed) +
                                  " tagged images, corpus has " + std::to_string(corpus.size()));
  const std::size_t channels = corpus.front().code.channels();
  for (std::size_t s : opts.sources_per_item)
    require(s >= 1 && s <= kMaxSources && s <= channels + 1, ErrorKind::validation,
            "sources_per_item must be in 1..4 and at most M+2");

  Rng rng(opts.seed);
  std::vector<std::size_t> order(corpus.size());
  std::iota(order.begin(), order.end(), std::size_t{0});
  for (std::size_t i = order.size(); i > 1; --i) std::swap(order[i - 1], order[rng.below(i)]);
  const std::vector<std::size_t> base_pool(order.begin(), order.begin() + static_cast<long>(opts.n_pool));
  const std::vector<std::size_t> donor_pool =
      need_donors ? std::vector<std::size_t>(order.begin() + static_cast<long>(opts.n_pool),
                                             order.begin() + static_cast<long>(2 * opts.n_pool))
                  : std::vector<std::size_t>{};

  std::vector<SuiteItem> suite;
  for (std::size_t item = 0; item < opts.n; ++item) {
    SuiteItem s;
    s.sources = opts.sources_per_item[item % opts.sources_per_item.size()];
    const TaggedCode& base = corpus[base_pool[rng.below(base_pool.size())]];
    s.base_id = base.image_id;
    s.base_code = base.code;
    std::vector<std::size_t> p_idxs(channels);
    std::iota(p_idxs.begin(), p_idxs.end(), std::size_t{0});
    std::vector<Donor> donors;
    for (std::size_t j = 1; j < s.sources; ++j) {
      const std::size_t rand_idx = rng.below(p_idxs.size());
      const std::size_t channel = p_idxs[rand_idx];
      p_idxs.erase(p_idxs.begin() + static_cast<long>(rand_idx));
      std::vector<std::size_t> candidates;
      for (std::size_t d : donor_pool)
        if (corpus[d].code.pairs[channel].present &&
            std::find(s.donor_ids.begin(), s.donor_ids.end(), corpus[d].image_id) == s.donor_ids.end())
          candidates.push_back(d);
      if (candidates.empty())
        fail(ErrorKind::capacity, "no unused donor in the pool has channel " + std::to_string(channel) + " present");
      const TaggedCode& donor = corpus[candidates[rng.below(candidates.size())]];
      donors.push_back({donor.code, channel});
      s.donor_ids.push_back(donor.image_id);
      s.replaced_channels.push_back(channel);
    }
    s.input = compose(base.code, donors);
    suite.push_back(std::move(s));
  }
  return suite;
}

inline nlohmann::json suite_to_json(const std::vector<SuiteItem>& suite) {
  nlohmann::json items = nlohmann::json::array();
  for (const auto& s : suite)
    items.push_back({{"input", code_to_json(s.input)},
                     {"sources", s.sources},
                     {"base_id", s.base_id},
                     {"base_code", code_to_json(s.base_code)},
                     {"donor_ids", s.donor_ids},
                     {"replaced_channels", s.replaced_channels}});
  return {{"format", "partsmith-suite"}, {"version", 1}, {"items", items}};
}

inline std::vector<SuiteItem> suite_from_json(const nlohmann::json& j) {
  require(j.value("format", "") == "partsmith-suite", ErrorKind::format, "not a composition suite");
  std::vector<SuiteItem> suite;
  for (const auto& it : j.at("items")) {
    SuiteItem s;
    s.input = code_from_json(it.at("input"));
    s.sources = it.at("sources").get<std::size_t>();
    s.base_id = it.value("base_id", "");
    if (it.contains("base_code")) s.base_code = code_from_json(it.at("base_code"));
    s.donor_ids = it.value("donor_ids", std::vector<std::string>{});
    s.replaced_channels = it.value("replaced_channels", std::vector<std::size_t>{});
    suite.push_back(std::move(s));
  }
  return suite;
}

// ---- generation ---------------------------------------------------------------------

struct SamplerOptions {
  std::size_t steps = 50;
  std::uint64_t seed = 0;
  std::string style_suffix;
};

struct GenerationResult {
  Matrix latent;  // latent_channels x cells
  RgbImage image;
  std::string prompt;
  AttentionStack attention;  // raw maps averaged over sampler steps
};

/// Evenly strided subsequence of the training schedule, descending.
inline std::vector<std::size_t> sampler_timesteps(std::size_t train_steps, std::size_t steps) {
  require(steps >= 1 && steps <= train_steps, ErrorKind::validation, "sampler steps out of range");
  std::vector<std::size_t> ts;
  const std::size_t stride = train_steps / steps;
  for (std::size_t i = steps; i-- > 0;) ts.push_back(i * stride);
  return ts;
}

/// Ancestral DDPM over a strided schedule from pure noise.
inline GenerationResult sample_latent(DenoiserBackend& backend, const Conditioning& cond,
                                      const NoiseSchedule& schedule, const SamplerOptions& opts) {
  const BackendCapabilities caps = backend.capabilities();
  const std::size_t cells = caps.latent_h * caps.latent_w;
  Rng rng(opts.seed);
  Matrix z(caps.latent_channels, cells);
  for (double& v : z.data) v = rng.normal();
  const auto ts = sampler_timesteps(schedule.steps(), opts.steps);
  GenerationResult out;
  for (std::size_t s = 0; s < ts.size(); ++s) {
    const std::size_t t = ts[s];
    NoisePrediction pred = backend.predict_noise(z, t, cond);
    require(pred.eps.same_shape(z), ErrorKind::validation, "backend returned a mis-shaped noise prediction");
    if (s == 0) {
      out.attention = pred.attention;
    } else {
      for (std::size_t k = 0; k < out.attention.data.size(); ++k) out.attention.data[k] += pred.attention.data[k];
    }
    const double ab = schedule.alpha_bar[t];
    const double ab_prev = s + 1 < ts.size() ? schedule.alpha_bar[ts[s + 1]] : 1.0;
    const double alpha = ab / ab_prev;
    const double beta = 1.0 - alpha;
    for (std::size_t k = 0; k < z.data.size(); ++k) {
      const double x0 = (z.data[k] - std::sqrt(1.0 - ab) * pred.eps.data[k]) / std::sqrt(ab);
      z.data[k] = std::sqrt(ab_prev) * beta / (1.0 - ab) * x0 + std::sqrt(alpha) * (1.0 - ab_prev) / (1.0 - ab) * z.data[k];
    }
    if (s + 1 < ts.size()) {
      const double sigma = std::sqrt(beta * (1.0 - ab_prev) / (1.0 - ab));
      for (double& v : z.data) v += sigma * rng.normal();
    }
  }
  if (!out.attention.data.empty())
    for (double& v : out.attention.data) v /= static_cast<double>(ts.size());
  out.latent = std::move(z);
  return out;
}

/// Prompt "template [m,k] ... suffix" through the learned tokens, sampled with the
/// model's toy denoiser (or `backend` when given), decoded at `patch` pixels per cell.
inline GenerationResult generate(CreatureModel& model, const PromptCode& code, const SamplerOptions& opts,
                                 DenoiserBackend* backend = nullptr, std::size_t patch = 4) {
  validate(code, model.M, model.K);
  DenoiserBackend& net = backend != nullptr ? *backend : model.backend;
  const BackendCapabilities caps = net.capabilities();
  require(caps.embed_dim == model.tokens.embed_dim(), ErrorKind::validation,
          "backend embedding width does not match the checkpoint");
  GenerationResult out = sample_latent(net, model.condition(code, opts.style_suffix), model.backend.schedule(), opts);
  out.image = PatchAutoencoder(patch).decode(out.latent, caps.latent_h, caps.latent_w);
  out.prompt = model.prompt_text(code, opts.style_suffix);
  return out;
}

}  // namespace partsmith
