// Copyright (C) 2026 The partsmith Authors
// SPDX-License-Identifier: Apache-2.0

#pragma once

#include <algorithm>
#include <filesystem>
#include <map>
#include <memory>
#include <optional>
#include <string>
#include <vector>

#include <nlohmann/json.hpp>

#include "partsmith/composition.hpp"
#include "partsmith/denoiser.hpp"
#include "partsmith/discovery.hpp"
#include "partsmith/feature_io.hpp"
#include "partsmith/image.hpp"
#include "partsmith/losses.hpp"
#include "partsmith/matrix.hpp"
#include "partsmith/model.hpp"
#include "partsmith/psfm.hpp"
#include "partsmith/training.hpp"

namespace partsmith {

struct EvalResult {
  double emr = 0.0;
  double cosim = 0.0;
  std::vector<double> channel_match;   // per channel, 0 or 1
  std::vector<double> channel_cosine;  // per channel
  std::size_t n_samples = 0;
};

inline PromptCode predict_code(const RgbImage& image, const SubConceptDictionary& dict,
                               const ExtractorAdapter& extractor, const std::string& image_id = "generated") {
  return tag_image(extract_features(image, extractor, image_id), dict).code;
}

/// Channelwise comparison over all M+1 channels. Two absent channels agree (match 1,
/// cosine 1); absent against present is a mismatch with cosine 0.
inline EvalResult emr_cosim(const PromptCode& a, const PromptCode& b, const SubConceptDictionary& dict) {
  for (const PromptCode* c : {&a, &b}) {
    require(c->channels() == dict.channels(), ErrorKind::validation,
            "code has " + std::to_string(c->channels()) + " channels, dictionary has " +
                std::to_string(dict.channels()));
    validate(*c, dict.M, dict.K);
  }
  EvalResult r;
  r.n_samples = 1;
  for (std::size_t m = 0; m < dict.channels(); ++m) {
    const CodePair& x = a.pairs[m];
    const CodePair& y = b.pairs[m];
    double match = 0.0, cos = 0.0;
    if (!x.present && !y.present) {
      match = cos = 1.0;
    } else if (x.present && y.present) {
      match = x.split == y.split ? 1.0 : 0.0;
      cos = x.split == y.split ? 1.0 : cosine(dict.split_centroid(m, x.split), dict.split_centroid(m, y.split));
    }
    r.channel_match.push_back(match);
    r.channel_cosine.push_back(cos);
  }
  // Sum first, divide once: EMR is then the exact ratio matches / channels.
  for (std::size_t m = 0; m < dict.channels(); ++m) {
    r.emr += r.channel_match[m];
    r.cosim += r.channel_cosine[m];
  }
  r.emr /= static_cast<double>(dict.channels());
  r.cosim /= static_cast<double>(dict.channels());
  return r;
}

/// Arithmetic mean of per-sample results.
inline EvalResult aggregate(const std::vector<EvalResult>& results) {
  require(!results.empty(), ErrorKind::validation, "nothing to aggregate");
  EvalResult out;
  const std::size_t channels = results.front().channel_match.size();
  out.channel_match.assign(channels, 0.0);
  out.channel_cosine.assign(channels, 0.0);
  const double inv = 1.0 / static_cast<double>(results.size());
  for (const auto& r : results) {
    out.emr += r.emr * inv;
    out.cosim += r.cosim * inv;
    for (std::size_t m = 0; m < channels; ++m) {
      out.channel_match[m] += r.channel_match[m] * inv;
      out.channel_cosine[m] += r.channel_cosine[m] * inv;
    }
  }
  out.n_samples = results.size();
  return out;
}

inline nlohmann::json to_json(const EvalResult& r) {
  return {{"emr", r.emr}, {"cosim", r.cosim}, {"n_samples", r.n_samples},
          {"channel_match", r.channel_match}, {"channel_cosine", r.channel_cosine}};
}

struct SuiteReport {
  EvalResult overall;
  std::map<std::size_t, EvalResult> per_k;  // keyed by sources_per_item
  std::size_t failed = 0;
  std::vector<std::string> failures;
  std::vector<EvalResult> samples;
  std::vector<PromptCode> generated;
};

/// Generates every suite item (seed = base seed + item index), re-tags the output and
/// scores it against the input code. Failed items are counted and excluded.
inline SuiteReport eval_suite(const std::vector<SuiteItem>& suite, CreatureModel& model,
                              const SubConceptDictionary& dict, const ExtractorAdapter& extractor,
                              const SamplerOptions& sampler = {}, DenoiserBackend* backend = nullptr,
                              std::size_t patch = 4) {
  require(!suite.empty(), ErrorKind::validation, "empty evaluation suite");
  require(dict.M == model.M && dict.K == model.K, ErrorKind::validation,
          "dictionary shape does not match the checkpoint");
  SuiteReport report;
  std::map<std::size_t, std::vector<EvalResult>> buckets;
  std::vector<EvalResult> ok;
  for (std::size_t i = 0; i < suite.size(); ++i) {
    SamplerOptions opts = sampler;
    opts.seed = sampler.seed + i;
    try {
      const GenerationResult g = generate(model, suite[i].input, opts, backend, patch);
      const PromptCode gen = predict_code(g.image, dict, extractor, "suite" + std::to_string(i));
      const EvalResult r = emr_cosim(suite[i].input, gen, dict);
      ok.push_back(r);
      buckets[suite[i].sources].push_back(r);
      report.samples.push_back(r);
      report.generated.push_back(gen);
    } catch (const Error& e) {
      if (e.kind() == ErrorKind::validation) throw;
      ++report.failed;
      report.failures.push_back("item " + std::to_string(i) + ": " + e.what());
    }
  }
  if (ok.empty()) fail(ErrorKind::backend_unavailable, "every suite item failed; first failure: " + report.failures.front());
  report.overall = aggregate(ok);
  for (const auto& [k, rs] : buckets) report.per_k[k] = aggregate(rs);
  return report;
}

inline nlohmann::json to_json(const SuiteReport& r) {
  nlohmann::json per_k = nlohmann::json::array();
  for (const auto& [k, res] : r.per_k) {
    nlohmann::json row = to_json(res);
    row["sources_per_item"] = k;
    per_k.push_back(row);
  }
  return {{"emr", r.overall.emr},
          {"cosim", r.overall.cosim},
          {"n_samples", r.overall.n_samples},
          {"failed", r.failed},
          {"failures", r.failures},
          {"per_k", per_k},
          {"skipped_metrics", {{"fid", "unavailable"}}}};
}

// ---- embedding similarity -------------------------------------------------------

class ImageEmbedder {
 public:
  virtual ~ImageEmbedder() = default;
  virtual std::string name() const = 0;
  virtual bool available() const = 0;
  virtual std::vector<double> embed(const RgbImage& image) const = 0;
};

struct SimilarityResult {
  std::string status = "unavailable";  // "ok" or "unavailable"
  std::optional<double> value;
};

/// Mean cosine between paired embeddings, or an explicit "unavailable" status.
inline SimilarityResult embedding_similarity(const std::vector<RgbImage>& real,
                                             const std::vector<RgbImage>& generated,
                                             const ImageEmbedder* embedder) {
  require(real.size() == generated.size() && !real.empty(), ErrorKind::validation,
          "image sets must be non-empty and paired");
  if (embedder == nullptr || !embedder->available()) return {};
  double total = 0.0;
  for (std::size_t i = 0; i < real.size(); ++i) total += cosine(embedder->embed(real[i]), embedder->embed(generated[i]));
  return {"ok", total / static_cast<double>(real.size())};
}

// ---- attention diagnostics ------------------------------------------------------

/// Channel with the largest normalized attention at each cell (ties to the lower index).
inline std::vector<std::size_t> argmax_channels(const NormalizedAttention& a) {
  std::vector<std::size_t> out(a.cells(), 0);
  for (std::size_t i = 0; i < a.cells(); ++i) {
    double best = -1.0;
    for (std::size_t m = 0; m < a.channels; ++m)
      if (a.present[m] && a.at(m, i) > best) {
        best = a.at(m, i);
        out[i] = m;
      }
  }
  return out;
}

/// Mean over present channels of IoU(argmax map == m, mask m).
inline double attention_iou(const NormalizedAttention& a, const PartMaskSet& masks) {
  require(a.channels == masks.channels() && a.h == masks.grid_h && a.w == masks.grid_w,
          ErrorKind::validation, "attention and mask shapes differ");
  const auto labels = argmax_channels(a);
  double total = 0.0;
  std::size_t n = 0;
  for (std::size_t m = 0; m < a.channels; ++m) {
    if (!a.present[m] && !masks.present[m]) continue;
    std::size_t inter = 0, uni = 0;
    for (std::size_t i = 0; i < a.cells(); ++i) {
      const bool p = labels[i] == m && a.present[m];
      const bool s = masks.masks[m][i] != 0;
      inter += (p && s) ? 1 : 0;
      uni += (p || s) ? 1 : 0;
    }
    total += uni > 0 ? static_cast<double>(inter) / static_cast<double>(uni) : 1.0;
    ++n;
  }
  return n > 0 ? total / static_cast<double>(n) : 0.0;
}

inline const std::vector<std::size_t> kProbeTimesteps = {100, 300, 500, 700, 900};

/// Raw maps for a training sample averaged over noised copies at `timesteps`.
inline AttentionStack probe_attention(CreatureModel& model, const TrainSample& sample,
                                      const std::vector<std::size_t>& timesteps, std::uint64_t seed) {
  Rng rng(seed);
  const Conditioning cond = model.condition(sample.code);
  AttentionStack acc;
  for (std::size_t t : timesteps) {
    Matrix noise(sample.latent.rows, sample.latent.cols);
    for (double& v : noise.data) v = rng.normal();
    const NoisePrediction p =
        model.backend.predict_noise(add_noise(model.backend.schedule(), sample.latent, noise, t), t, cond);
    if (acc.data.empty()) {
      acc = p.attention;
    } else {
      for (std::size_t k = 0; k < acc.data.size(); ++k) acc.data[k] += p.attention.data[k];
    }
  }
  for (double& v : acc.data) v /= static_cast<double>(timesteps.size());
  return acc;
}

/// Mean attention IoU over training samples.
inline double mean_attention_iou(CreatureModel& model, const std::vector<TrainSample>& samples,
                                 const std::vector<std::size_t>& timesteps = kProbeTimesteps,
                                 std::uint64_t seed = 0) {
  require(!samples.empty(), ErrorKind::validation, "no samples to probe");
  double total = 0.0;
  for (std::size_t i = 0; i < samples.size(); ++i)
    total += attention_iou(normalize_attention(probe_attention(model, samples[i], timesteps, seed + i)),
                           samples[i].masks);
  return total / static_cast<double>(samples.size());
}

struct AttentionDump {
  std::vector<std::filesystem::path> heatmaps;  // one per present channel
  std::filesystem::path tensor;                 // normalized maps, grid_h x grid_w x channels
  NormalizedAttention attention;
};

/// Writes channel_<m>.png (normalized map scaled to 0..255) for each present channel
/// plus attention.psfm holding every channel.
inline AttentionDump write_attention(const AttentionStack& stack, const std::filesystem::path& out_dir) {
  AttentionDump d;
  d.attention = normalize_attention(stack);
  const NormalizedAttention& a = d.attention;
  std::filesystem::create_directories(out_dir);
  std::vector<double> channel_last(a.cells() * a.channels);
  for (std::size_t m = 0; m < a.channels; ++m)
    for (std::size_t i = 0; i < a.cells(); ++i) channel_last[i * a.channels + m] = a.at(m, i);
  d.tensor = out_dir / "attention.psfm";
  psfm::write_file(d.tensor, psfm::from_doubles(static_cast<std::uint32_t>(a.h), static_cast<std::uint32_t>(a.w),
                                                static_cast<std::uint32_t>(a.channels), channel_last));
  for (std::size_t m = 0; m < a.channels; ++m) {
    if (!a.present[m]) continue;
    std::vector<std::uint8_t> px(a.cells());
    for (std::size_t i = 0; i < a.cells(); ++i)
      px[i] = static_cast<std::uint8_t>(std::lround(std::clamp(a.at(m, i), 0.0, 1.0) * 255.0));
    const auto path = out_dir / ("channel_" + std::to_string(m) + ".png");
    psfm::write_file_bytes(path, encode_png(a.w, a.h, 1, px));
    d.heatmaps.push_back(path);
  }
  return d;
}

/// Attention of a generation from `code`, averaged over sampler steps.
inline AttentionDump dump_attention(CreatureModel& model, const PromptCode& code,
                                    const std::filesystem::path& out_dir, const SamplerOptions& opts = {},
                                    DenoiserBackend* backend = nullptr) {
  DenoiserBackend& net = backend != nullptr ? *backend : model.backend;
  if (net.capabilities().attention_taps.empty())
    fail(ErrorKind::unsupported, "backend exposes no attention taps");
  const GenerationResult g = generate(model, code, opts, backend);
  return write_attention(g.attention, out_dir);
}

}  // namespace partsmith
