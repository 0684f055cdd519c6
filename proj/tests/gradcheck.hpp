// Copyright (C) 2026 The partsmith Authors
// SPDX-License-Identifier: Apache-2.0

#pragma once

// Central-difference check of the training gradients through the toy denoiser.

#include <map>
#include <random>
#include <string>
#include <vector>

#include "oracles.hpp"
#include "partsmith/training.hpp"

namespace partsmith::oracle {

struct GradGroupError {
  std::string group;  // tokens, projector, lora
  double relative_error = 0.0;
  std::size_t coordinates = 0;
};

inline std::string group_of(const std::string& name) {
  if (name == "token_table") return "tokens";
  if (name.rfind("projector.", 0) == 0) return "projector";
  return "lora";
}

/// Gives every LoRA up factor a random value so the down factors receive gradient too.
inline void randomize_lora(CreatureModel& model, std::mt19937_64& gen, double scale = 0.1) {
  std::normal_distribution<double> n(0.0, scale);
  for (ad::Param* p : model.backend.lora_params())
    if (p->name.size() > 3 && p->name.compare(p->name.size() - 3, 3, "_up") == 0)
      for (double& v : p->value.data) v = n(gen);
}

/// Compares backprop against central differences of l_total on up to `per_param`
/// random coordinates of each trainable parameter (token rows restricted to those
/// the sample's prompt uses).
inline std::vector<GradGroupError> gradient_check(CreatureModel& model, const TrainSample& sample,
                                                  const SampleDraw& draw, std::mt19937_64& gen,
                                                  std::size_t per_param = 16, double h = 1e-5) {
  auto params = model.trainable();
  for (ad::Param* p : params) p->zero_grad();
  sample_loss(model, sample, draw, 1.0);
  std::map<std::string, std::pair<std::vector<double>, std::vector<double>>> groups;
  auto loss = [&] { return sample_loss(model, sample, draw, 1.0, false).l_total; };
  for (ad::Param* p : params) {
    std::vector<std::size_t> candidates;
    if (p->name == "token_table") {
      for (const auto& pair : sample.code.pairs)
        if (pair.present)
          for (std::size_t c = 0; c < p->value.cols; ++c)
            candidates.push_back(model.tokens.index(pair.channel, pair.split) * p->value.cols + c);
    } else {
      for (std::size_t k = 0; k < p->value.size(); ++k) candidates.push_back(k);
    }
    std::shuffle(candidates.begin(), candidates.end(), gen);
    if (candidates.size() > per_param) candidates.resize(per_param);
    auto& [analytic, numeric] = groups[group_of(p->name)];
    for (std::size_t k : candidates) {
      analytic.push_back(p->grad.data[k]);
      numeric.push_back(central_difference(p->value.data[k], loss, h));
    }
  }
  std::vector<GradGroupError> out;
  for (const auto& [name, ab] : groups)
    out.push_back({name, relative_error(ab.first, ab.second), ab.first.size()});
  return out;
}

}  // namespace partsmith::oracle
