// Copyright (C) 2026 The partsmith Authors
// SPDX-License-Identifier: Apache-2.0

#pragma once

// The desk-scale toy task end to end: render creatures, extract stub features, fit the
// dictionary, train, then probe attention and score a composition suite.

#include <string>
#include <vector>

#include <nlohmann/json.hpp>

#include "partsmith/composition.hpp"
#include "partsmith/discovery.hpp"
#include "partsmith/evaluation.hpp"
#include "partsmith/feature_io.hpp"
#include "partsmith/model.hpp"
#include "partsmith/toy_task.hpp"
#include "partsmith/training.hpp"

namespace partsmith {

inline const std::vector<double> kDefaultLambdaGrid = {0.1, 0.01, 0.001, 0.0001, 0.00001};

/// Training settings for the toy task. The frozen base is first fitted to a captioned
/// creature corpus, and the learning rate is raised to make 500 steps meaningful.
inline TrainConfig toy_train_config() {
  TrainConfig c;
  c.max_steps = 500;
  c.lr = 1e-2;
  c.log_every = 50;
  c.checkpoint_every = 500;
  c.image_size = toy::kImageSize;
  c.backend.pretrain_steps = 3000;
  return c;
}

struct ToyTaskConfig {
  std::size_t n_images = 8;
  std::size_t M = 2;
  std::size_t K = 2;
  std::uint64_t image_seed = 0;
  std::uint64_t dict_seed = 0;
  std::size_t suite_size = 50;
  std::vector<std::size_t> sources_per_item = {1, 2, 3, 4};
  std::size_t sampler_steps = 50;
  TrainConfig train = toy_train_config();
};

struct ToyTask {
  ToyTaskConfig config;
  std::vector<std::string> ids;
  std::vector<RgbImage> images;
  std::vector<FeatureMap> features;
  SubConceptDictionary dict;
  std::vector<TrainSample> samples;
  std::vector<TaggedCode> tagged;
};

inline ToyTask make_toy_task(const ToyTaskConfig& cfg = {}) {
  ToyTask task;
  task.config = cfg;
  const StubExtractor extractor;
  const auto creatures = toy::creatures(cfg.n_images, cfg.image_seed);
  for (std::size_t i = 0; i < creatures.size(); ++i) {
    task.ids.push_back(toy::image_id(i));
    task.images.push_back(toy::render(creatures[i]));
    task.features.push_back(extract_features(task.images.back(), extractor, task.ids.back()));
  }
  task.dict = fit_hierarchy(task.features, cfg.M, cfg.K, cfg.dict_seed, {}, "toy");
  task.samples = make_samples(task.ids, task.images, task.features, task.dict, cfg.train.backend);
  for (std::size_t i = 0; i < task.ids.size(); ++i)
    task.tagged.push_back({task.ids[i], tag_image(task.features[i], task.dict).code});
  return task;
}

inline std::vector<SuiteItem> toy_suite(const ToyTask& task, std::uint64_t seed) {
  SuiteOptions opts;
  opts.n = task.config.suite_size;
  opts.n_pool = task.tagged.size() / 2;
  opts.sources_per_item = task.config.sources_per_item;
  opts.seed = seed;
  return sample_composition_suite(task.tagged, opts);
}

struct ToyRun {
  double lambda_attn = 0.0;
  std::uint64_t seed = 0;
  CreatureModel model;
  TrainState state;
  double attention_iou = 0.0;
  SuiteReport composition;
};

/// Trains one model; `evaluate_suite` adds the composition suite scores.
inline ToyRun run_toy(const ToyTask& task, double lambda_attn, std::uint64_t seed, bool evaluate_suite = true,
                      bool use_projector = true) {
  TrainConfig cfg = task.config.train;
  cfg.lambda_attn = lambda_attn;
  cfg.seed = seed;
  cfg.use_projector = use_projector;
  ToyRun run;
  run.lambda_attn = lambda_attn;
  run.seed = seed;
  run.model = CreatureModel::create(cfg, task.config.M, task.config.K);
  run.state = train(run.model, task.samples, initial_state(cfg));
  run.attention_iou = mean_attention_iou(run.model, task.samples, kProbeTimesteps, seed);
  if (evaluate_suite) {
    const StubExtractor extractor;
    SamplerOptions sampler;
    sampler.steps = task.config.sampler_steps;
    sampler.seed = seed * 1000;
    run.composition = eval_suite(toy_suite(task, seed), run.model, task.dict, extractor, sampler, nullptr,
                                 toy::kPatch);
  }
  return run;
}

struct SweepRow {
  double lambda_attn = 0.0;
  double emr = 0.0;
  double cosim = 0.0;
  double attention_iou = 0.0;
  std::size_t seeds = 0;
};

/// One row per lambda, averaged over seeds. FID is not computed.
inline std::vector<SweepRow> lambda_sweep(const ToyTask& task, const std::vector<double>& lambdas,
                                          const std::vector<std::uint64_t>& seeds) {
  require(!lambdas.empty() && !seeds.empty(), ErrorKind::validation, "sweep needs lambdas and seeds");
  std::vector<SweepRow> rows;
  for (double lambda : lambdas) {
    SweepRow row{lambda, 0.0, 0.0, 0.0, seeds.size()};
    for (std::uint64_t seed : seeds) {
      const ToyRun run = run_toy(task, lambda, seed);
      row.emr += run.composition.overall.emr / static_cast<double>(seeds.size());
      row.cosim += run.composition.overall.cosim / static_cast<double>(seeds.size());
      row.attention_iou += run.attention_iou / static_cast<double>(seeds.size());
    }
    rows.push_back(row);
  }
  return rows;
}

inline nlohmann::json sweep_to_json(const std::vector<SweepRow>& rows) {
  nlohmann::json out = nlohmann::json::array();
  for (const auto& r : rows)
    out.push_back({{"lambda_attn", r.lambda_attn}, {"emr", r.emr}, {"cosim", r.cosim},
                   {"attention_iou", r.attention_iou}, {"seeds", r.seeds}, {"fid", "unavailable"}});
  return out;
}

}  // namespace partsmith
