// Copyright (C) 2026 The partsmith Authors
// SPDX-License-Identifier: Apache-2.0

#include <gtest/gtest.h>

#include <cmath>
#include <random>
#include <set>

#include "oracles.hpp"
#include "partsmith/composition.hpp"
#include "partsmith/experiment.hpp"
#include "test_util.hpp"

namespace partsmith {
namespace {

using testing::expect_error;

std::vector<TaggedCode> random_corpus(std::mt19937_64& gen, std::size_t n, std::size_t M, std::size_t K) {
  std::vector<TaggedCode> out;
  for (std::size_t i = 0; i < n; ++i) {
    PromptCode c = oracle::random_code(gen, M, K, 0.85);
    c.pairs[0].present = true;  // every image has a background
    if (c.pairs[0].split == 0) c.pairs[0].split = 1;
    out.push_back({"img" + std::to_string(i), c});
  }
  return out;
}

TEST(Compose, ReplacesOnlyTheDonatedChannels) {
  PromptCode base = make_code(3), donor = make_code(3);
  for (std::size_t m = 0; m <= 3; ++m) {
    base.pairs[m] = {m, 1, true};
    donor.pairs[m] = {m, 2, true};
  }
  base.pairs[2].present = false;
  const PromptCode out = compose(base, {{donor, 2}, {donor, 0}});
  EXPECT_EQ(out.pairs[0], (CodePair{0, 2, true}));
  EXPECT_EQ(out.pairs[1], base.pairs[1]);
  EXPECT_EQ(out.pairs[2], (CodePair{2, 2, true}));
  EXPECT_EQ(out.pairs[3], base.pairs[3]);
  EXPECT_EQ(compose(base, {}), base);
}

TEST(Compose, RejectsBadDonors) {
  PromptCode base = make_code(2), donor = make_code(2), wide = make_code(3);
  donor.pairs[1] = {1, 1, true};
  expect_error(ErrorKind::validation, [&] { compose(base, {{donor, 2}}); });  // absent in donor
  expect_error(ErrorKind::validation, [&] { compose(base, {{donor, 5}}); });
  expect_error(ErrorKind::validation, [&] { compose(base, {{wide, 1}}); });
  expect_error(ErrorKind::validation, [&] { compose(base, {{donor, 1}, {donor, 1}}); });
}

TEST(Suite, EachDonorPopsADistinctChannel) {
  std::mt19937_64 gen(3);
  const auto corpus = random_corpus(gen, 120, 5, 4);
  SuiteOptions opts;
  opts.n = 400;
  opts.n_pool = 60;
  opts.seed = 11;
  const auto suite = sample_composition_suite(corpus, opts);
  std::map<std::string, PromptCode> by_id;
  for (const auto& t : corpus) by_id[t.image_id] = t.code;
  for (std::size_t i = 0; i < suite.size(); ++i) {
    const auto& s = suite[i];
    EXPECT_EQ(s.sources, opts.sources_per_item[i % 4]);
    ASSERT_EQ(s.donor_ids.size(), s.sources - 1);
    ASSERT_EQ(s.replaced_channels.size(), s.sources - 1);
    EXPECT_EQ(std::set<std::size_t>(s.replaced_channels.begin(), s.replaced_channels.end()).size(),
              s.replaced_channels.size());
    EXPECT_EQ(std::set<std::string>(s.donor_ids.begin(), s.donor_ids.end()).size(), s.donor_ids.size());
    for (std::size_t m = 0; m < s.input.channels(); ++m) {
      const auto it = std::find(s.replaced_channels.begin(), s.replaced_channels.end(), m);
      if (it == s.replaced_channels.end()) {
        EXPECT_EQ(s.input.pairs[m], s.base_code.pairs[m]);
      } else {
        const auto& donor = by_id.at(s.donor_ids[static_cast<std::size_t>(it - s.replaced_channels.begin())]);
        EXPECT_EQ(s.input.pairs[m], donor.pairs[m]);
      }
    }
  }
}

TEST(Suite, PoolsAreDisjoint) {
  std::mt19937_64 gen(5);
  const auto corpus = random_corpus(gen, 40, 3, 3);
  SuiteOptions opts;
  opts.n = 300;
  opts.n_pool = 20;
  const auto suite = sample_composition_suite(corpus, opts);
  std::set<std::string> bases, donors;
  for (const auto& s : suite) {
    bases.insert(s.base_id);
    donors.insert(s.donor_ids.begin(), s.donor_ids.end());
  }
  for (const auto& b : bases) EXPECT_EQ(donors.count(b), 0u) << b;
  EXPECT_LE(bases.size(), 20u);
  EXPECT_LE(donors.size(), 20u);
}

TEST(Suite, DeterministicAndSeedSensitive) {
  std::mt19937_64 gen(1);
  const auto corpus = random_corpus(gen, 30, 3, 2);
  SuiteOptions opts;
  opts.n = 50;
  opts.n_pool = 15;
  const auto a = sample_composition_suite(corpus, opts), b = sample_composition_suite(corpus, opts);
  EXPECT_EQ(suite_to_json(a), suite_to_json(b));
  opts.seed = 1;
  EXPECT_NE(suite_to_json(sample_composition_suite(corpus, opts)), suite_to_json(a));
  const auto back = suite_from_json(suite_to_json(a));
  ASSERT_EQ(back.size(), a.size());
  for (std::size_t i = 0; i < a.size(); ++i) {
    EXPECT_EQ(back[i].input, a[i].input);
    EXPECT_EQ(back[i].replaced_channels, a[i].replaced_channels);
  }
}

TEST(Suite, CapacityAndRangeErrors) {
  std::mt19937_64 gen(2);
  const auto corpus = random_corpus(gen, 10, 3, 2);
  SuiteOptions opts;
  opts.n = 5;
  opts.n_pool = 6;
  expect_error(ErrorKind::capacity, [&] { sample_composition_suite(corpus, opts); });
  opts.n_pool = 5;
  opts.sources_per_item = {5};
  expect_error(ErrorKind::validation, [&] { sample_composition_suite(corpus, opts); });
  // No donor has channel 3 present.
  std::vector<TaggedCode> sparse = corpus;
  for (auto& t : sparse) t.code.pairs[3].present = false;
  opts.sources_per_item = {4};
  expect_error(ErrorKind::capacity, [&] { sample_composition_suite(sparse, opts); });
  // A single-source suite needs only the base pool.
  opts.sources_per_item = {1};
  opts.n_pool = 10;
  for (const auto& s : sample_composition_suite(corpus, opts)) EXPECT_EQ(s.input, s.base_code);
}

// ---- sampler ----------------------------------------------------------------------------

/// Exact posterior-mean noise for a data distribution concentrated on one latent.
class PointMassDenoiser final : public DenoiserBackend {
 public:
  explicit PointMassDenoiser(Matrix target) : target_(std::move(target)) {}
  BackendCapabilities capabilities() const override { return {}; }
  NoisePrediction predict_noise(const Matrix& z_t, std::size_t t, const Conditioning&) override {
    const double ab = schedule_.alpha_bar[t];
    NoisePrediction p;
    p.eps = Matrix(z_t.rows, z_t.cols);
    for (std::size_t k = 0; k < z_t.data.size(); ++k)
      p.eps.data[k] = (z_t.data[k] - std::sqrt(ab) * target_.data[k]) / std::sqrt(1.0 - ab);
    ++calls;
    return p;
  }
  std::size_t calls = 0;

 private:
  Matrix target_;
  NoiseSchedule schedule_ = NoiseSchedule::linear();
};

TEST(Sampler, TimestepsAreEvenlyStridedAndDescending) {
  const auto ts = sampler_timesteps(1000, 50);
  ASSERT_EQ(ts.size(), 50u);
  EXPECT_EQ(ts.front(), 980u);
  EXPECT_EQ(ts.back(), 0u);
  for (std::size_t i = 1; i < ts.size(); ++i) EXPECT_EQ(ts[i - 1] - ts[i], 20u);
  EXPECT_EQ(sampler_timesteps(1000, 1), (std::vector<std::size_t>{0}));
  expect_error(ErrorKind::validation, [] { sampler_timesteps(1000, 0); });
  expect_error(ErrorKind::validation, [] { sampler_timesteps(1000, 1001); });
}

TEST(Sampler, ExactDenoiserRecoversItsTarget) {
  std::mt19937_64 gen(4);
  Matrix target(4, 256);
  for (double& v : target.data) v = std::normal_distribution<double>()(gen);
  for (std::size_t steps : {1, 10, 50, 1000}) {
    PointMassDenoiser net(target);
    SamplerOptions opts;
    opts.steps = steps;
    opts.seed = steps;
    const auto out = sample_latent(net, {}, NoiseSchedule::linear(), opts);
    EXPECT_EQ(net.calls, steps);
    for (std::size_t k = 0; k < target.data.size(); ++k) ASSERT_NEAR(out.latent.data[k], target.data[k], 1e-9);
  }
}

TEST(Sampler, SeedDeterminesTheResult) {
  ToyTaskConfig tc;
  tc.train.backend.pretrain_steps = 0;
  CreatureModel model = CreatureModel::create(tc.train, 2, 2);
  PromptCode code = make_code(2);
  code.pairs[0] = {0, 1, true};
  code.pairs[2] = {2, 2, true};
  SamplerOptions opts;
  opts.steps = 5;
  opts.seed = 3;
  const auto a = generate(model, code, opts), b = generate(model, code, opts);
  EXPECT_EQ(a.image, b.image);
  EXPECT_EQ(a.prompt, "a photo of a [0,1] [2,2]");
  opts.seed = 4;
  EXPECT_NE(generate(model, code, opts).latent, a.latent);
  opts.style_suffix = "pencil sketch";
  EXPECT_EQ(generate(model, code, opts).prompt, "a photo of a [0,1] [2,2] pencil sketch");
}

}  // namespace
}  // namespace partsmith
