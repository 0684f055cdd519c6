// Copyright (C) 2026 The partsmith Authors
// SPDX-License-Identifier: Apache-2.0

#pragma once

// Joint optimisation of the token table, projector and LoRA adapters on
//   L_total = || eps - eps_hat(z_t, t, prompt) ||^2 + lambda * L_attn.

#include <cmath>
#include <cstdio>
#include <filesystem>
#include <functional>
#include <numeric>
#include <string>
#include <vector>

#include "partsmith/denoiser.hpp"
#include "partsmith/discovery.hpp"
#include "partsmith/feature_io.hpp"
#include "partsmith/losses.hpp"
#include "partsmith/model.hpp"

namespace partsmith {

struct TrainSample {
  std::string image_id;
  Matrix latent;      // latent_channels x cells
  PromptCode code;
  PartMaskSet masks;  // on the attention grid
};

/// Encodes the image and moves its masks to the attention grid. A part that vanishes
/// at the coarser resolution is dropped from the prompt so code and masks agree.
inline TrainSample make_sample(const std::string& image_id, const RgbImage& image, const TagResult& tag,
                               const ToyDenoiserConfig& backend) {
  require(image.width == image.height && image.width % backend.grid == 0, ErrorKind::validation,
          "image " + image_id + " must be square with a side divisible by " + std::to_string(backend.grid));
  const PatchAutoencoder vae(image.width / backend.grid);
  TrainSample s{image_id, vae.encode(image), tag.code, downsample_masks(tag.masks, backend.grid, backend.grid)};
  for (std::size_t m = 0; m < s.code.pairs.size(); ++m)
    if (!s.masks.present[m]) s.code.pairs[m].present = false;
  return s;
}

inline std::vector<TrainSample> make_samples(const std::vector<std::string>& ids,
                                             const std::vector<RgbImage>& images,
                                             const std::vector<FeatureMap>& features,
                                             const SubConceptDictionary& dict,
                                             const ToyDenoiserConfig& backend) {
  require(ids.size() == images.size() && images.size() == features.size(), ErrorKind::validation,
          "ids, images and feature maps must have the same length");
  std::vector<TrainSample> out;
  for (std::size_t i = 0; i < images.size(); ++i)
    out.push_back(make_sample(ids[i], images[i], tag_image(features[i], dict), backend));
  return out;
}

// ---- backend checks ---------------------------------------------------------------

/// Training needs attention taps whenever the attention term is active, and a
/// backend that exposes gradients.
inline ToyDenoiser& require_trainable(DenoiserBackend& backend, const TrainConfig& cfg) {
  if (cfg.lambda_attn > 0.0 && backend.capabilities().attention_taps.empty())
    fail(ErrorKind::unsupported,
         "backend exposes no attention taps; the attention loss needs them (set lambda_attn to 0 to "
         "train without it)");
  auto* toy = dynamic_cast<ToyDenoiser*>(&backend);
  if (toy == nullptr)
    fail(ErrorKind::dependency, "backend does not expose gradients; training needs the in-process denoiser");
  return *toy;
}

inline void attach_lora(DenoiserBackend& backend, std::size_t rank, double alpha, Rng& rng) {
  auto* toy = dynamic_cast<ToyDenoiser*>(&backend);
  if (toy == nullptr) fail(ErrorKind::unsupported, "LoRA adapters need the in-process denoiser");
  toy->attach_lora(rank, alpha, rng);
}

// ---- one sample ---------------------------------------------------------------------

struct SampleDraw {
  bool flip = false;
  std::size_t t = 0;
  Matrix noise;
};

inline SampleDraw draw_sample(Rng& rng, const TrainConfig& cfg, const ToyDenoiser& backend) {
  SampleDraw d;
  d.flip = cfg.horizontal_flip && rng.uniform() < 0.5;
  d.t = rng.below(backend.schedule().steps());
  d.noise = Matrix(backend.config().latent_channels, backend.cells());
  for (double& v : d.noise.data) v = rng.normal();
  return d;
}

/// Forward plus backward for one sample; gradients are scaled by `weight` and added
/// to every trainable parameter.
inline LossReport sample_loss(CreatureModel& model, const TrainSample& sample, const SampleDraw& draw,
                              double weight, bool run_backward = true) {
  const TrainConfig& cfg = model.config;
  ToyDenoiser& net = model.backend;
  const std::size_t grid = net.config().grid;
  Matrix z0 = draw.flip ? flip_latent_horizontal(sample.latent, grid, grid) : sample.latent;
  const PartMaskSet masks = draw.flip ? flip_masks_horizontal(sample.masks) : sample.masks;
  const Matrix z_t = add_noise(net.schedule(), z0, draw.noise, draw.t);

  ad::Tape tape;
  PromptGraph prompt = build_prompt(tape, sample.code, model.tokens, model.projector, model.template_vectors);
  ToyDenoiser::Graph g = net.forward(tape, z_t, draw.t, prompt.context);

  // noise target in token layout (cells x channels)
  Matrix target(net.cells(), net.config().latent_channels);
  for (std::size_t c = 0; c < target.cols; ++c)
    for (std::size_t i = 0; i < target.rows; ++i) target(i, c) = draw.noise(c, i);

  LossReport report;
  report.lambda_attn = cfg.lambda_attn;
  const ad::Var eps_var = g.eps;
  report.l_ldm = diffusion_loss(target.data, tape.value(eps_var).data);
  ad::Var ldm = tape.custom(Matrix(1, 1, {report.l_ldm}), {eps_var},
                            [eps_var, target](ad::Tape& t, std::size_t self) {
                              const double up = t.grad_of(self).data[0];
                              Matrix d(target.rows, target.cols,
                                       diffusion_loss_backward(target.data, t.value(eps_var).data));
                              for (double& v : d.data) v *= up;
                              t.accumulate(eps_var, d);
                            });

  const AttentionStack stack =
      net.gather_attention(tape, g, prompt.positions, prompt.channel_of_position, model.M + 1);
  const NormalizedAttention norm = normalize_attention(stack);
  const AttnLossKind kind = cfg.attn_loss;
  report.l_attn = kind == AttnLossKind::entropy ? attention_loss(norm, masks) : attention_loss_mse(norm, masks);
  report.l_total = total_loss(report.l_ldm, report.l_attn, cfg.lambda_attn);
  if (!run_backward) return report;

  ad::Var total = ldm;
  if (cfg.lambda_attn > 0.0) {
    const std::vector<ad::Var> layers = g.attention;
    const auto positions = prompt.positions;
    const auto channels = prompt.channel_of_position;
    ad::Var attn = tape.custom(
        Matrix(1, 1, {report.l_attn}), layers,
        [layers, positions, channels, stack, norm, masks, kind](ad::Tape& t, std::size_t self) {
          const double up = t.grad_of(self).data[0];
          const auto d_norm = kind == AttnLossKind::entropy ? attention_loss_backward(norm, masks)
                                                            : attention_loss_mse_backward(norm, masks);
          const auto d_raw = normalize_attention_backward(stack, d_norm);
          for (std::size_t l = 0; l < layers.size(); ++l) {
            const Matrix& A = t.value(layers[l]);
            Matrix dA(A.rows, A.cols);
            for (std::size_t j = 0; j < positions.size(); ++j)
              for (std::size_t i = 0; i < A.rows; ++i)
                dA(i, positions[j]) = up * d_raw[(l * stack.channels + channels[j]) * stack.cells() + i];
            t.accumulate(layers[l], dA);
          }
        });
    total = tape.add(ldm, tape.scale(attn, cfg.lambda_attn));
  }
  tape.backward(total, weight);
  return report;
}

// ---- loop ----------------------------------------------------------------------------

struct LogEntry {
  std::size_t step = 0;
  LossReport loss;
  double loss_ema = 0.0;
};

struct TrainOptions {
  std::filesystem::path out_dir;  // empty: no checkpoints
  CheckpointInfo info;
  std::function<void(const LogEntry&)> on_log;
  std::size_t stop_at = 0;  // stop early after this optimizer step (0: run to the end)
};

inline constexpr double kLossEmaDecay = 0.98;

inline std::size_t samples_per_step(const TrainConfig& c) { return c.batch_size * c.grad_accumulation; }

inline std::size_t total_steps(const TrainConfig& c, std::size_t n_samples) {
  if (c.max_steps > 0) return c.max_steps;
  const std::size_t per = samples_per_step(c);
  return (c.epochs * n_samples + per - 1) / per;
}

/// Sample index at position `pos` of the concatenated per-epoch shuffles. Shuffles
/// depend only on (seed, epoch), so a resumed run sees the same order.
inline std::size_t stream_index(std::size_t pos, std::size_t n, std::uint64_t seed) {
  const std::size_t epoch = pos / n;
  std::vector<std::size_t> order(n);
  std::iota(order.begin(), order.end(), std::size_t{0});
  Rng shuffle(detail::splitmix64(seed ^ (0x65706F6368ull + epoch)));
  for (std::size_t i = n; i > 1; --i) std::swap(order[i - 1], order[shuffle.below(i)]);
  return order[pos % n];
}

inline std::string checkpoint_name(std::size_t step) {
  char buf[32];
  std::snprintf(buf, sizeof buf, "step-%06zu", step);
  return buf;
}

inline TrainState initial_state(const TrainConfig& cfg) {
  TrainState s;
  s.rng = Rng(cfg.seed);
  return s;
}

/// One optimizer step over `batch` sample indices.
/// A non-finite loss aborts the step; when `dump_dir` is set the offending batch is
/// written there as nonfinite-step-N.json first.
inline LossReport train_step(CreatureModel& model, const std::vector<TrainSample>& samples,
                             const std::vector<std::size_t>& batch, TrainState& state,
                             const std::filesystem::path& dump_dir = {}) {
  require(!batch.empty(), ErrorKind::validation, "empty batch");
  auto params = model.trainable();
  for (ad::Param* p : params) p->zero_grad();
  LossReport mean;
  mean.lambda_attn = model.config.lambda_attn;
  const double w = 1.0 / static_cast<double>(batch.size());
  std::string ids;
  nlohmann::json dump = {{"step", state.step + 1}, {"samples", nlohmann::json::array()}};
  for (std::size_t idx : batch) {
    const SampleDraw draw = draw_sample(state.rng, model.config, model.backend);
    const LossReport r = sample_loss(model, samples.at(idx), draw, w);
    mean.l_ldm += w * r.l_ldm;
    mean.l_attn += w * r.l_attn;
    mean.l_total += w * r.l_total;
    ids += (ids.empty() ? "" : ",") + samples[idx].image_id + "@t=" + std::to_string(draw.t);
    dump["samples"].push_back({{"image_id", samples[idx].image_id}, {"t", draw.t}, {"flip", draw.flip},
                               {"code", samples[idx].code.to_string()},
                               {"l_ldm", r.l_ldm}, {"l_attn", r.l_attn}});
  }
  bool finite = std::isfinite(mean.l_total);
  for (ad::Param* p : params) finite = finite && all_finite(p->grad.data);
  if (!finite) {
    std::string where;
    if (!dump_dir.empty()) {
      const auto path = dump_dir / ("nonfinite-step-" + std::to_string(state.step + 1) + ".json");
      psfm::write_file_bytes(path, dump.dump(2) + "\n");
      where = "; batch dumped to " + path.string();
    }
    fail(ErrorKind::numerical, "non-finite loss or gradient at step " + std::to_string(state.step + 1) +
                                   " (samples " + ids + ")" + where);
  }
  adamw_step(params, state.optimizer, model.config);
  ++state.step;
  state.loss_ema = state.step == 1 ? mean.l_total
                                   : kLossEmaDecay * state.loss_ema + (1.0 - kLossEmaDecay) * mean.l_total;
  state.history.push_back(mean);
  return mean;
}

inline void write_checkpoint(CreatureModel& model, TrainState& state, const TrainOptions& opts) {
  const std::string name = checkpoint_name(state.step);
  state.lineage.push_back(name);
  save_checkpoint(opts.out_dir / name, model, state, opts.info);
  psfm::write_file_bytes(opts.out_dir / "latest", name + "\n");
}

/// Runs from `state.step` to the configured end. Checkpoints land in
/// out_dir/step-NNNNNN with out_dir/latest naming the newest.
inline TrainState train(CreatureModel& model, const std::vector<TrainSample>& samples, TrainState state,
                        const TrainOptions& opts = {}) {
  const TrainConfig& cfg = model.config;
  validate(cfg);
  require_trainable(model.backend, cfg);
  require(!samples.empty(), ErrorKind::validation, "no training samples");
  for (const auto& s : samples) {
    validate(s.code, model.M, model.K);
    require(s.masks.grid_h == model.backend.config().grid && s.masks.channels() == model.M + 1,
            ErrorKind::validation, "masks of " + s.image_id + " do not match the attention grid");
  }
  const std::size_t end = total_steps(cfg, samples.size());
  const std::size_t stop = opts.stop_at > 0 ? std::min(opts.stop_at, end) : end;
  const std::size_t per = samples_per_step(cfg);
  while (state.step < stop) {
    std::vector<std::size_t> batch;
    for (std::size_t k = 0; k < per; ++k)
      batch.push_back(stream_index(state.step * per + k, samples.size(), cfg.seed));
    const LossReport r = train_step(model, samples, batch, state, opts.out_dir);
    const bool last = state.step == stop;
    if (opts.on_log && (state.step % cfg.log_every == 0 || last || state.step == 1))
      opts.on_log({state.step, r, state.loss_ema});
    if (!opts.out_dir.empty() && (state.step % cfg.checkpoint_every == 0 || last))
      write_checkpoint(model, state, opts);
  }
  return state;
}

/// Mean of the first and last `window` totals; used to report training progress.
inline std::pair<double, double> smoothed_endpoints(const std::vector<LossReport>& history,
                                                    std::size_t window) {
  require(!history.empty(), ErrorKind::validation, "empty loss history");
  window = std::max<std::size_t>(1, std::min(window, history.size()));
  double first = 0.0, last = 0.0;
  for (std::size_t i = 0; i < window; ++i) {
    first += history[i].l_total;
    last += history[history.size() - 1 - i].l_total;
  }
  return {first / static_cast<double>(window), last / static_cast<double>(window)};
}

}  // namespace partsmith
