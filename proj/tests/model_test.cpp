// Copyright (C) 2026 The partsmith Authors
// SPDX-License-Identifier: Apache-2.0

#include <gtest/gtest.h>

#include <cmath>
#include <cstring>
#include <filesystem>
#include <random>

#include "gradcheck.hpp"
#include "oracles.hpp"
#include "partsmith/autodiff.hpp"
#include "partsmith/denoiser.hpp"
#include "partsmith/experiment.hpp"
#include "partsmith/model.hpp"
#include "partsmith/pretrain.hpp"
#include "partsmith/token_space.hpp"
#include "test_util.hpp"

namespace partsmith {
namespace {

using testing::expect_error;

PromptCode full_code(std::size_t M, std::size_t k) {
  PromptCode c = make_code(M);
  for (auto& p : c.pairs) {
    p.split = k;
    p.present = true;
  }
  return c;
}

Matrix random_matrix(std::mt19937_64& gen, std::size_t r, std::size_t c) {
  Matrix m(r, c);
  std::normal_distribution<double> n;
  for (double& v : m.data) v = n(gen);
  return m;
}

// ---- autodiff ------------------------------------------------------------------------

double check_op(const std::function<ad::Var(ad::Tape&, ad::Var)>& op, Matrix x, std::mt19937_64& gen) {
  ad::Param p("x", x);
  Matrix w;
  auto f = [&] {
    ad::Tape tape;
    ad::Var y = op(tape, tape.param(p));
    if (w.data.empty()) w = random_matrix(gen, tape.value(y).rows, tape.value(y).cols);
    double acc = 0.0;
    for (std::size_t k = 0; k < w.size(); ++k) acc += w.data[k] * tape.value(y).data[k];
    return acc;
  };
  f();
  ad::Tape tape;
  ad::Var y = op(tape, tape.param(p));
  ad::Var s = tape.custom(Matrix(1, 1), {y}, [y, &w](ad::Tape& t, std::size_t self) {
    Matrix g = w;
    for (double& v : g.data) v *= t.grad_of(self).data[0];
    t.accumulate(y, g);
  });
  p.zero_grad();
  tape.backward(s);
  std::vector<double> numeric(p.value.size());
  for (std::size_t k = 0; k < p.value.size(); ++k) numeric[k] = oracle::central_difference(p.value.data[k], f, 1e-6);
  return oracle::relative_error(p.grad.data, numeric);
}

TEST(Autodiff, OpsMatchFiniteDifferences) {
  std::mt19937_64 gen(1);
  const Matrix b = random_matrix(gen, 4, 3), row = random_matrix(gen, 1, 4);
  EXPECT_LT(check_op([&](ad::Tape& t, ad::Var x) { return t.matmul(x, t.constant(b)); }, random_matrix(gen, 5, 4), gen), 1e-8);
  EXPECT_LT(check_op([&](ad::Tape& t, ad::Var x) { return t.matmul_bt(x, x); }, random_matrix(gen, 3, 4), gen), 1e-8);
  EXPECT_LT(check_op([&](ad::Tape& t, ad::Var x) { return t.softmax_rows(x); }, random_matrix(gen, 3, 5), gen), 1e-8);
  EXPECT_LT(check_op([&](ad::Tape& t, ad::Var x) { return t.add_row(x, t.constant(row)); }, random_matrix(gen, 3, 4), gen), 1e-8);
  EXPECT_LT(check_op([&](ad::Tape& t, ad::Var x) { return t.scale(t.relu(x), 0.3); }, random_matrix(gen, 3, 4), gen), 1e-8);
  EXPECT_LT(check_op([&](ad::Tape& t, ad::Var x) { return t.rms_norm_rows(x); }, random_matrix(gen, 3, 6), gen), 1e-8);
  EXPECT_LT(check_op([&](ad::Tape& t, ad::Var x) { return t.gather_rows(x, {2, 0, 2}); }, random_matrix(gen, 3, 4), gen), 1e-8);
  EXPECT_LT(check_op([&](ad::Tape& t, ad::Var x) { return t.concat_rows(x, t.constant(b)); }, random_matrix(gen, 2, 3), gen), 1e-8);
}

TEST(Autodiff, FrozenParamsGetNoGradient) {
  ad::Param frozen("w", Matrix(2, 2, 1.0), false), live("v", Matrix(2, 2, 1.0));
  ad::Tape tape;
  ad::Var y = tape.matmul(tape.param(frozen), tape.param(live));
  ad::Var s = tape.custom(Matrix(1, 1), {y}, [y](ad::Tape& t, std::size_t) { t.accumulate(y, Matrix(2, 2, 1.0)); });
  tape.backward(s);
  for (double g : frozen.grad.data) EXPECT_EQ(g, 0.0);
  for (double g : live.grad.data) EXPECT_EQ(g, 2.0);
}

// ---- token space ---------------------------------------------------------------------

TEST(TokenSpace, IndexIsChannelMajor) {
  WordEmbedder words(16);
  Rng rng(0);
  const auto d = TokenDictionary::create(5, 256, words, rng);
  EXPECT_EQ(d.num_tokens(), 6u * 256u);
  EXPECT_EQ(d.index(0, 1), 0u);
  EXPECT_EQ(d.index(1, 1), 256u);
  EXPECT_EQ(d.index(5, 256), 6u * 256u - 1u);
  EXPECT_EQ(d.index(2, 42), 2u * 256u + 41u);
}

TEST(TokenSpace, RowsStartNearTheWordMean) {
  WordEmbedder words(16);
  Rng rng(3);
  const auto d = TokenDictionary::create(2, 4, words, rng);
  const auto mean = words.mean_embedding();
  for (std::size_t r = 0; r < d.num_tokens(); ++r)
    for (std::size_t c = 0; c < 16; ++c) EXPECT_LT(std::abs(d.table.value(r, c) - mean[c]), 0.5);
}

TEST(TokenSpace, ProjectorShapesAndPassThrough) {
  Rng rng(0);
  auto p = Projector::create(16, 32, rng);
  EXPECT_EQ(p.hidden(), 32u);
  EXPECT_EQ(p.params().size(), 4u);
  EXPECT_EQ(Projector::pass_through().params().size(), 0u);
  auto id = Projector::pass_through();
  ad::Tape tape;
  Matrix x(2, 16, 0.25);
  EXPECT_EQ(tape.value(id.forward(tape, tape.constant(x))), x);
}

TEST(TokenSpace, PromptAppendsPresentChannelsAfterTemplate) {
  WordEmbedder words(16);
  Rng rng(0);
  auto dict = TokenDictionary::create(3, 4, words, rng);
  auto proj = Projector::create(16, 32, rng);
  const Matrix tmpl = words.embed_words(split_words(kDefaultTemplate));
  PromptCode code = full_code(3, 2);
  code.pairs[1].present = false;
  code.pairs[3].split = 4;
  const auto e = embed_code(code, dict, proj, tmpl, words.embed_words({"pencil", "drawing"}));
  EXPECT_EQ(e.token_vectors.rows, 4u + 3u + 2u);
  EXPECT_EQ(e.positions, (std::vector<std::size_t>{4, 5, 6}));
  EXPECT_EQ(e.channel_of_position, (std::vector<std::size_t>{0, 2, 3}));
  // The template rows pass through untouched.
  for (std::size_t c = 0; c < 16; ++c) EXPECT_EQ(e.token_vectors(0, c), tmpl(0, c));
}

TEST(TokenSpace, IdentityBaselineUsesRawRows) {
  WordEmbedder words(16);
  Rng rng(0);
  auto dict = TokenDictionary::create(2, 3, words, rng);
  PromptCode code = full_code(2, 3);
  const auto e = identity_baseline(code, dict, Matrix(0, 16));
  for (std::size_t c = 0; c < 16; ++c) EXPECT_EQ(e.token_vectors(1, c), dict.table.value(dict.index(1, 3), c));
}

TEST(TokenSpace, RejectsInvalidCodes) {
  WordEmbedder words(16);
  Rng rng(0);
  auto dict = TokenDictionary::create(2, 3, words, rng);
  auto proj = Projector::pass_through();
  PromptCode code = full_code(2, 4);
  expect_error(ErrorKind::validation, [&] { embed_code(code, dict, proj, Matrix(0, 16)); });
  code = make_code(2);
  expect_error(ErrorKind::validation, [&] { embed_code(code, dict, proj, Matrix(0, 16)); });
}

// ---- toy denoiser --------------------------------------------------------------------

Conditioning random_condition(std::mt19937_64& gen, std::size_t tokens, std::size_t channels) {
  Conditioning c;
  c.channels = channels;
  c.prompt.token_vectors = random_matrix(gen, tokens, 16);
  for (std::size_t m = 0; m < channels; ++m) {
    c.prompt.positions.push_back(tokens - channels + m);
    c.prompt.channel_of_position.push_back(m);
  }
  return c;
}

TEST(ToyDenoiser, LoraZeroInitIsBitIdentical) {
  ToyDenoiser base, adapted;
  Rng rng(5);
  adapted.attach_lora(4, 4.0, rng);
  std::mt19937_64 gen(2);
  for (int trial = 0; trial < 100; ++trial) {
    const Matrix z = random_matrix(gen, 4, 256);
    const std::size_t t = gen() % 1000;
    const auto cond = random_condition(gen, 4 + gen() % 4, 3);
    const auto a = base.predict_noise(z, t, cond), b = adapted.predict_noise(z, t, cond);
    ASSERT_EQ(std::memcmp(a.eps.data.data(), b.eps.data.data(), a.eps.data.size() * sizeof(double)), 0);
    ASSERT_EQ(std::memcmp(a.attention.data.data(), b.attention.data.data(), a.attention.data.size() * sizeof(double)), 0);
  }
}

TEST(ToyDenoiser, LoraParameterCountIsRankTimesInPlusOut) {
  ToyDenoiserConfig cfg;
  ToyDenoiser net(cfg);
  Rng rng(0);
  const std::size_t r = 4;
  net.attach_lora(r, 4.0, rng);
  // Per block: q (width x attn), k (embed x attn), v (embed x width), out (width x width).
  const std::size_t per_block = r * (cfg.width + cfg.attn_dim) + r * (cfg.embed_dim + cfg.attn_dim) +
                                r * (cfg.embed_dim + cfg.width) + r * (cfg.width + cfg.width);
  std::size_t n = 0;
  for (ad::Param* p : net.lora_params()) n += p->value.size();
  EXPECT_EQ(n, cfg.blocks * per_block);
  EXPECT_EQ(n, 3u * (4u * 48u + 4u * 32u + 4u * 48u + 4u * 64u));
}

TEST(ToyDenoiser, AttentionRowsAreDistributions) {
  ToyDenoiser net;
  std::mt19937_64 gen(4);
  const Matrix z = random_matrix(gen, 4, 256);
  ad::Tape tape;
  const auto cond = random_condition(gen, 7, 3);
  auto g = net.forward(tape, z, 500, tape.constant(cond.prompt.token_vectors));
  ASSERT_EQ(g.attention.size(), 3u);
  for (ad::Var a : g.attention) {
    const Matrix& m = tape.value(a);
    for (std::size_t i = 0; i < m.rows; ++i) {
      double s = 0.0;
      for (double v : m.row(i)) s += v;
      EXPECT_NEAR(s, 1.0, 1e-12);
    }
  }
}

TEST(ToyDenoiser, ExtremeInputsStayFinite) {
  ToyDenoiser net;
  Rng rng(1);
  net.attach_lora(4, 4.0, rng);
  for (ad::Param* p : net.lora_params())
    for (double& v : p->value.data) v = 0.5 * rng.normal();
  std::mt19937_64 gen(6);
  std::uniform_real_distribution<double> mag(-4.0, 4.0);
  for (int trial = 0; trial < 10000; ++trial) {
    Matrix z(4, 256);
    const double scale = std::pow(10.0, mag(gen));
    for (double& v : z.data) v = scale * std::normal_distribution<double>()(gen);
    const auto cond = random_condition(gen, 3 + gen() % 3, 3);
    const auto p = net.predict_noise(z, gen() % 1000, cond);
    ASSERT_TRUE(all_finite(p.eps.data)) << "trial " << trial;
    ASSERT_TRUE(all_finite(p.attention.data)) << "trial " << trial;
    if (trial >= 200) trial += 49;  // the remaining magnitudes are sampled sparsely for speed
  }
}

TEST(ToyDenoiser, DeterministicAcrossInstances) {
  ToyDenoiser a, b;
  std::mt19937_64 gen(8);
  const Matrix z = random_matrix(gen, 4, 256);
  const auto cond = random_condition(gen, 5, 2);
  EXPECT_EQ(a.predict_noise(z, 10, cond).eps, b.predict_noise(z, 10, cond).eps);
  ToyDenoiserConfig other;
  other.seed = 1;
  EXPECT_NE(ToyDenoiser(other).predict_noise(z, 10, cond).eps, a.predict_noise(z, 10, cond).eps);
}

TEST(ToyDenoiser, RejectsMisshapedInputs) {
  ToyDenoiser net;
  std::mt19937_64 gen(1);
  const auto cond = random_condition(gen, 5, 2);
  expect_error(ErrorKind::validation, [&] { net.predict_noise(Matrix(3, 256), 0, cond); });
  expect_error(ErrorKind::validation, [&] { net.predict_noise(Matrix(4, 256), 1000, cond); });
  auto narrow = cond;
  narrow.prompt.token_vectors = Matrix(5, 8);
  expect_error(ErrorKind::validation, [&] { net.predict_noise(Matrix(4, 256), 0, narrow); });
}

TEST(ToyDenoiser, BaseWeightsAreFrozen) {
  ToyDenoiser net;
  for (ad::Param* p : net.base_params()) EXPECT_FALSE(p->trainable) << p->name;
  Rng rng(0);
  net.attach_lora(2, 2.0, rng);
  for (ad::Param* p : net.lora_params()) EXPECT_TRUE(p->trainable) << p->name;
}

TEST(PatchAutoencoder, EncodeDecodeEncodeIsExact) {
  const auto img = toy::render({1, 0, 1, 2});
  const PatchAutoencoder vae(4);
  const Matrix z = vae.encode(img);
  const Matrix z2 = vae.encode(vae.decode(z, 16, 16));
  for (std::size_t k = 0; k < z.size(); ++k) EXPECT_NEAR(z.data[k], z2.data[k], 1e-6);
}

// ---- gradients through the whole objective --------------------------------------------

TEST(Gradients, MatchCentralDifferences) {
  ToyTaskConfig tc;
  tc.train.backend.pretrain_steps = 0;
  const ToyTask task = make_toy_task(tc);
  std::mt19937_64 gen(17);
  for (double lambda : {0.01, 1.0})
    for (bool projector : {true, false}) {
      TrainConfig cfg = tc.train;
      cfg.lambda_attn = lambda;
      cfg.use_projector = projector;
      CreatureModel model = CreatureModel::create(cfg, tc.M, tc.K);
      oracle::randomize_lora(model, gen);
      Rng rng(3);
      const SampleDraw draw = draw_sample(rng, cfg, model.backend);
      for (const auto& e : oracle::gradient_check(model, task.samples[1], draw, gen, 8)) {
        EXPECT_LT(e.relative_error, 1e-4) << e.group << " lambda " << lambda << " projector " << projector;
        EXPECT_GT(e.coordinates, 0u);
      }
    }
}

// ---- config and checkpoints -----------------------------------------------------------

TEST(TrainConfig, JsonRoundTripAndPartialOverrides) {
  TrainConfig c;
  c.lr = 3e-3;
  c.lora_rank = 8;
  c.attn_loss = AttnLossKind::mse;
  c.horizontal_flip = false;
  c.backend.cross_attn_gain = 0.5;
  const nlohmann::json j = c;
  EXPECT_EQ(j.get<TrainConfig>(), c);
  const TrainConfig partial = nlohmann::json{{"lambda_attn", 0.1}}.get<TrainConfig>();
  EXPECT_EQ(partial.lambda_attn, 0.1);
  EXPECT_EQ(partial.batch_size, TrainConfig{}.batch_size);
  expect_error(ErrorKind::validation, [] { nlohmann::json{{"augmentation", "rotate"}}.get<TrainConfig>(); });
}

TEST(TrainConfig, DefaultsFollowTheMethod) {
  const TrainConfig c;
  EXPECT_EQ(c.batch_size, 2u);
  EXPECT_EQ(c.lr, 1e-4);
  EXPECT_EQ(c.lambda_attn, 0.01);
  EXPECT_EQ(c.epochs, 100u);
  EXPECT_EQ(c.image_size, 512u);
  EXPECT_EQ(c.template_text, "a photo of a");
  EXPECT_TRUE(c.horizontal_flip);
}

TEST(Checkpoint, RoundTripIsBitExact) {
  testing::TempDir dir;
  TrainConfig cfg = toy_train_config();
  cfg.backend.pretrain_steps = 3;
  CreatureModel model = CreatureModel::create(cfg, 2, 2);
  TrainState st = initial_state(cfg);
  st.step = 3;
  st.loss_ema = 0.25;
  st.history.push_back({0.5, 0.6, 0.506, 0.01});
  std::mt19937_64 gen(1);
  oracle::randomize_lora(model, gen);
  for (ad::Param* p : model.trainable()) detail::round_to_float(p->value);
  save_checkpoint(dir.path() / "ck", model, st, {"/dict", "abc"});
  LoadedCheckpoint back = load_checkpoint(dir.path() / "ck");
  auto a = model.trainable(), b = back.model.trainable();
  ASSERT_EQ(a.size(), b.size());
  for (std::size_t i = 0; i < a.size(); ++i) EXPECT_EQ(a[i]->value, b[i]->value) << a[i]->name;
  EXPECT_EQ(back.state.step, 3u);
  EXPECT_EQ(back.info.dictionary_checksum, "abc");
  EXPECT_EQ(back.model.config, cfg);
  EXPECT_EQ(base_checksum(back.model.backend), base_checksum(model.backend));
}

TEST(Checkpoint, StoredBaseIsUsedAndVerified) {
  testing::TempDir dir;
  TrainConfig cfg = toy_train_config();
  cfg.backend.pretrain_steps = 2;
  cfg.backend.seed = 77;  // a configuration no other test has pretrained
  CreatureModel model = CreatureModel::create(cfg, 2, 2);
  save_checkpoint(dir.path() / "ck", model, initial_state(cfg), {});
  ASSERT_TRUE(std::filesystem::exists(dir.path() / "ck" / "base.bin"));
  std::string blob = psfm::read_file_bytes(dir.path() / "ck" / "base.bin");
  blob[blob.size() - 3] ^= 0x01;
  psfm::write_file_bytes(dir.path() / "ck" / "base.bin", blob);
  expect_error(ErrorKind::corruption, [&] { load_checkpoint(dir.path() / "ck"); });
}

// ---- base pretraining -----------------------------------------------------------------

TEST(Pretrain, ReducesDenoisingLossAndFreezesTheBase) {
  ToyDenoiserConfig cfg;
  const WordEmbedder words(cfg.embed_dim, cfg.seed);
  const PatchAutoencoder vae(toy::kPatch);
  const toy::Creature c{0, 1, 0, 2};
  const Matrix z0 = vae.encode(toy::render(c));
  Conditioning cond;
  cond.prompt.token_vectors = words.embed_words(split_words(toy_caption(c)));
  Rng rng(4);
  std::vector<std::pair<std::size_t, Matrix>> probes;
  for (std::size_t t : {100, 400, 700}) {
    Matrix noise(z0.rows, z0.cols);
    for (double& v : noise.data) v = rng.normal();
    probes.emplace_back(t, noise);
  }
  auto error = [&](ToyDenoiser& net) {
    double acc = 0.0;
    for (const auto& [t, noise] : probes) {
      const auto p = net.predict_noise(add_noise(net.schedule(), z0, noise, t), t, cond);
      for (std::size_t ch = 0; ch < noise.rows; ++ch)
        for (std::size_t i = 0; i < noise.cols; ++i) acc += std::pow(p.eps(ch, i) - noise(ch, i), 2);
    }
    return acc;
  };
  ToyDenoiser raw(cfg), fitted(cfg);
  pretrain_base(fitted, words, 300);
  EXPECT_LT(error(fitted), 0.5 * error(raw));
  for (ad::Param* p : fitted.base_params()) EXPECT_FALSE(p->trainable);
  EXPECT_NE(base_checksum(raw), base_checksum(fitted));
}

TEST(Pretrain, MakeBaseIsDeterministicAndCached) {
  ToyDenoiserConfig cfg;
  cfg.pretrain_steps = 5;
  cfg.seed = 31;
  ToyDenoiser a = make_base(cfg);
  ToyDenoiser b = make_base(cfg);
  EXPECT_EQ(base_checksum(a), base_checksum(b));
  ToyDenoiser fresh(cfg);
  pretrain_base(fresh, WordEmbedder(cfg.embed_dim, cfg.seed), 5);
  EXPECT_EQ(base_checksum(fresh), base_checksum(a));
  cfg.pretrain_steps = 0;
  ToyDenoiser random_base = make_base(cfg), plain(cfg);
  EXPECT_EQ(base_checksum(random_base), base_checksum(plain));
}

TEST(Checkpoint, CorruptionIsDetected) {
  testing::TempDir dir;
  TrainConfig cfg = toy_train_config();
  cfg.backend.pretrain_steps = 0;
  CreatureModel model = CreatureModel::create(cfg, 2, 2);
  TrainState st = initial_state(cfg);
  save_checkpoint(dir.path() / "ck", model, st, {});
  std::string blob = psfm::read_file_bytes(dir.path() / "ck" / "params.bin");
  blob[blob.size() / 2] ^= 0x01;
  psfm::write_file_bytes(dir.path() / "ck" / "params.bin", blob);
  expect_error(ErrorKind::corruption, [&] { load_checkpoint(dir.path() / "ck"); });
}

}  // namespace
}  // namespace partsmith
