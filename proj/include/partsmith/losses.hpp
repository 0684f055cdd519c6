// Copyright (C) 2026 The partsmith Authors
// SPDX-License-Identifier: Apache-2.0

#pragma once

// Reconstruction and attention objectives with their analytic gradients.
//
//   mean_A[m]   = (1/L) sum_l A[l][m]
//   norm_A[m]   = mean_A[m] / sum_{present k} mean_A[k]         (per cell)
//   L_attn      = mean over present m and cells of BCE(mask[m], clamp(norm_A[m], eps, 1-eps))
//   L_total     = L_ldm + lambda * L_attn

#include <algorithm>
#include <cmath>
#include <string>
#include <vector>

#include "partsmith/discovery.hpp"
#include "partsmith/error.hpp"
#include "partsmith/matrix.hpp"

namespace partsmith {

inline constexpr double kDefaultLambdaAttn = 0.01;
inline constexpr double kAttnEpsilon = 1e-6;

enum class AttnLossKind { entropy, mse };

/// Raw cross-attention maps gathered at pseudo-token positions: L x C x (h*w).
struct AttentionStack {
  std::size_t layers = 0;
  std::size_t channels = 0;
  std::size_t h = 0;
  std::size_t w = 0;
  std::vector<double> data;
  std::vector<bool> present;

  AttentionStack() = default;
  AttentionStack(std::size_t L, std::size_t C, std::size_t h_, std::size_t w_)
      : layers(L), channels(C), h(h_), w(w_), data(L * C * h_ * w_, 0.0), present(C, false) {}

  std::size_t cells() const { return h * w; }
  double& at(std::size_t l, std::size_t m, std::size_t i) { return data[(l * channels + m) * cells() + i]; }
  double at(std::size_t l, std::size_t m, std::size_t i) const {
    return data[(l * channels + m) * cells() + i];
  }
};

struct NormalizedAttention {
  std::size_t channels = 0;
  std::size_t h = 0;
  std::size_t w = 0;
  std::vector<double> data;  // C x (h*w)
  std::vector<bool> present;

  std::size_t cells() const { return h * w; }
  double at(std::size_t m, std::size_t i) const { return data[m * cells() + i]; }
};

inline void validate(const AttentionStack& s) {
  require(s.layers >= 1 && s.channels >= 1 && s.h >= 1 && s.w >= 1, ErrorKind::validation,
          "attention stack must have at least one layer, channel and cell");
  require(s.data.size() == s.layers * s.channels * s.cells() && s.present.size() == s.channels,
          ErrorKind::validation, "attention stack data does not match its shape");
  for (double v : s.data)
    require(std::isfinite(v) && v >= 0.0, ErrorKind::validation,
            "attention maps must be finite and non-negative");
}

inline NormalizedAttention normalize_attention(const AttentionStack& s) {
  validate(s);
  const auto n_present = static_cast<std::size_t>(std::count(s.present.begin(), s.present.end(), true));
  require(n_present >= 1, ErrorKind::validation, "all attention channels are absent");
  NormalizedAttention out{s.channels, s.h, s.w, std::vector<double>(s.channels * s.cells(), 0.0),
                          s.present};
  const double inv_l = 1.0 / static_cast<double>(s.layers);
  std::vector<double> mean(s.channels);
  for (std::size_t i = 0; i < s.cells(); ++i) {
    double denom = 0.0;
    for (std::size_t m = 0; m < s.channels; ++m) {
      if (!s.present[m]) continue;
      double acc = 0.0;
      for (std::size_t l = 0; l < s.layers; ++l) acc += s.at(l, m, i);
      mean[m] = acc * inv_l;
      denom += mean[m];
    }
    for (std::size_t m = 0; m < s.channels; ++m) {
      if (!s.present[m]) continue;
      out.data[m * s.cells() + i] =
          denom > 0.0 ? mean[m] / denom : 1.0 / static_cast<double>(n_present);
    }
  }
  return out;
}

/// Chain rule through normalize_attention: dL/dA from dL/dnorm_A.
inline std::vector<double> normalize_attention_backward(const AttentionStack& s,
                                                        const std::vector<double>& d_norm) {
  std::vector<double> d_raw(s.data.size(), 0.0);
  const double inv_l = 1.0 / static_cast<double>(s.layers);
  std::vector<double> mean(s.channels, 0.0);
  for (std::size_t i = 0; i < s.cells(); ++i) {
    double denom = 0.0;
    for (std::size_t m = 0; m < s.channels; ++m) {
      if (!s.present[m]) continue;
      double acc = 0.0;
      for (std::size_t l = 0; l < s.layers; ++l) acc += s.at(l, m, i);
      mean[m] = acc * inv_l;
      denom += mean[m];
    }
    if (!(denom > 0.0)) continue;  // uniform fallback is locally constant
    // norm_m = mean_m / denom  =>  d mean_j = (d_norm_j - sum_m d_norm_m norm_m) / denom
    double weighted = 0.0;
    for (std::size_t m = 0; m < s.channels; ++m)
      if (s.present[m]) weighted += d_norm[m * s.cells() + i] * mean[m] / denom;
    for (std::size_t j = 0; j < s.channels; ++j) {
      if (!s.present[j]) continue;
      const double d_mean = (d_norm[j * s.cells() + i] - weighted) / denom;
      for (std::size_t l = 0; l < s.layers; ++l) d_raw[(l * s.channels + j) * s.cells() + i] = d_mean * inv_l;
    }
  }
  return d_raw;
}

namespace detail {

inline void check_loss_inputs(const NormalizedAttention& a, const PartMaskSet& masks) {
  require(a.channels == masks.channels() && a.h == masks.grid_h && a.w == masks.grid_w,
          ErrorKind::validation,
          "attention shape " + std::to_string(a.channels) + "x" + std::to_string(a.h) + "x" +
              std::to_string(a.w) + " does not match masks " + std::to_string(masks.channels()) +
              "x" + std::to_string(masks.grid_h) + "x" + std::to_string(masks.grid_w));
  for (std::size_t m = 0; m < a.channels; ++m)
    require(a.present[m] == masks.present[m], ErrorKind::validation,
            "presence of channel " + std::to_string(m) + " disagrees between attention and masks");
}

inline std::size_t present_count(const std::vector<bool>& present) {
  return static_cast<std::size_t>(std::count(present.begin(), present.end(), true));
}

}  // namespace detail

/// Mean binary cross-entropy between normalized attention and masks over present channels.
inline double attention_loss(const NormalizedAttention& a, const PartMaskSet& masks,
                             double eps = kAttnEpsilon) {
  detail::check_loss_inputs(a, masks);
  double total = 0.0;
  std::size_t n = 0;
  for (std::size_t m = 0; m < a.channels; ++m) {
    if (!a.present[m]) continue;
    for (std::size_t i = 0; i < a.cells(); ++i) {
      const double p = std::clamp(a.at(m, i), eps, 1.0 - eps);
      total -= masks.masks[m][i] ? std::log(p) : std::log(1.0 - p);
      ++n;
    }
  }
  return n > 0 ? total / static_cast<double>(n) : 0.0;
}

inline std::vector<double> attention_loss_backward(const NormalizedAttention& a,
                                                   const PartMaskSet& masks,
                                                   double eps = kAttnEpsilon) {
  detail::check_loss_inputs(a, masks);
  std::vector<double> d(a.data.size(), 0.0);
  const double inv_n = 1.0 / static_cast<double>(detail::present_count(a.present) * a.cells());
  for (std::size_t m = 0; m < a.channels; ++m) {
    if (!a.present[m]) continue;
    for (std::size_t i = 0; i < a.cells(); ++i) {
      const double raw = a.at(m, i);
      if (raw < eps || raw > 1.0 - eps) continue;  // clamped: zero gradient
      d[m * a.cells() + i] = (masks.masks[m][i] ? -1.0 / raw : 1.0 / (1.0 - raw)) * inv_n;
    }
  }
  return d;
}

/// Mean-square alternative, kept for the ablation flag only.
inline double attention_loss_mse(const NormalizedAttention& a, const PartMaskSet& masks) {
  detail::check_loss_inputs(a, masks);
  double total = 0.0;
  std::size_t n = 0;
  for (std::size_t m = 0; m < a.channels; ++m) {
    if (!a.present[m]) continue;
    for (std::size_t i = 0; i < a.cells(); ++i) {
      const double r = a.at(m, i) - (masks.masks[m][i] ? 1.0 : 0.0);
      total += r * r;
      ++n;
    }
  }
  return n > 0 ? total / static_cast<double>(n) : 0.0;
}

inline std::vector<double> attention_loss_mse_backward(const NormalizedAttention& a,
                                                       const PartMaskSet& masks) {
  detail::check_loss_inputs(a, masks);
  std::vector<double> d(a.data.size(), 0.0);
  const double inv_n = 1.0 / static_cast<double>(detail::present_count(a.present) * a.cells());
  for (std::size_t m = 0; m < a.channels; ++m) {
    if (!a.present[m]) continue;
    for (std::size_t i = 0; i < a.cells(); ++i)
      d[m * a.cells() + i] = 2.0 * (a.at(m, i) - (masks.masks[m][i] ? 1.0 : 0.0)) * inv_n;
  }
  return d;
}

/// Mean squared error over all elements.
inline double diffusion_loss(std::span<const double> noise, std::span<const double> predicted) {
  require(noise.size() == predicted.size() && !noise.empty(), ErrorKind::validation,
          "noise and prediction shapes differ");
  double s = 0.0;
  for (std::size_t i = 0; i < noise.size(); ++i) {
    const double d = noise[i] - predicted[i];
    s += d * d;
  }
  return s / static_cast<double>(noise.size());
}

/// d(diffusion_loss)/d(predicted).
inline std::vector<double> diffusion_loss_backward(std::span<const double> noise,
                                                   std::span<const double> predicted) {
  require(noise.size() == predicted.size() && !noise.empty(), ErrorKind::validation,
          "noise and prediction shapes differ");
  std::vector<double> d(noise.size());
  const double k = 2.0 / static_cast<double>(noise.size());
  for (std::size_t i = 0; i < noise.size(); ++i) d[i] = k * (predicted[i] - noise[i]);
  return d;
}

inline double total_loss(double l_ldm, double l_attn, double lambda_attn) {
  return l_ldm + lambda_attn * l_attn;
}

struct LossReport {
  double l_ldm = 0.0;
  double l_attn = 0.0;
  double l_total = 0.0;
  double lambda_attn = kDefaultLambdaAttn;
};

}  // namespace partsmith
