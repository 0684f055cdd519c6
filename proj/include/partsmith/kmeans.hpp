// Copyright (C) 2026 The partsmith Authors
// SPDX-License-Identifier: Apache-2.0

#pragma once

#include <cmath>
#include <limits>
#include <string>
#include <vector>

#include <nlohmann/json.hpp>

#include "partsmith/error.hpp"
#include "partsmith/matrix.hpp"
#include "partsmith/rng.hpp"

namespace partsmith {

struct KMeansOptions {
  int max_iterations = 300;
  double tolerance = 1e-6;  // relative inertia change
  int max_restarts = 3;

  bool operator==(const KMeansOptions&) const = default;
};

inline void to_json(nlohmann::json& j, const KMeansOptions& o) {
  j = {{"max_iterations", o.max_iterations}, {"tolerance", o.tolerance},
       {"max_restarts", o.max_restarts}};
}

inline void from_json(const nlohmann::json& j, KMeansOptions& o) {
  o.max_iterations = j.value("max_iterations", 300);
  o.tolerance = j.value("tolerance", 1e-6);
  o.max_restarts = j.value("max_restarts", 3);
}

struct KMeansResult {
  Matrix centroids;  // k x dim
  std::vector<std::size_t> labels;
  double inertia = 0.0;
  int iterations = 0;
  int restarts = 0;
};

/// Index of the nearest row of `centroids`; ties go to the lower index.
inline std::size_t nearest_row(const Matrix& centroids, std::span<const double> x) {
  std::size_t best = 0;
  double best_d = std::numeric_limits<double>::infinity();
  for (std::size_t c = 0; c < centroids.rows; ++c) {
    const double d = squared_distance(centroids.row(c), x);
    if (d < best_d) {
      best_d = d;
      best = c;
    }
  }
  return best;
}

namespace detail {

// k-means++ seeding. Returns false when fewer than k distinct seeds exist.
inline bool seed_plus_plus(const Matrix& pts, std::size_t k, Rng& rng, Matrix& centroids) {
  const std::size_t n = pts.rows;
  centroids = Matrix(k, pts.cols);
  std::size_t first = rng.below(n);
  std::copy(pts.row(first).begin(), pts.row(first).end(), centroids.row(0).begin());
  std::vector<double> d2(n);
  for (std::size_t i = 0; i < n; ++i) d2[i] = squared_distance(pts.row(i), centroids.row(0));
  for (std::size_t c = 1; c < k; ++c) {
    double total = 0.0;
    for (double v : d2) total += v;
    if (!(total > 0.0)) return false;
    double target = rng.uniform() * total;
    std::size_t pick = n - 1;
    for (std::size_t i = 0; i < n; ++i) {
      target -= d2[i];
      if (target < 0.0 && d2[i] > 0.0) {
        pick = i;
        break;
      }
    }
    while (d2[pick] == 0.0 && pick > 0) --pick;
    std::copy(pts.row(pick).begin(), pts.row(pick).end(), centroids.row(c).begin());
    for (std::size_t i = 0; i < n; ++i)
      d2[i] = std::min(d2[i], squared_distance(pts.row(i), centroids.row(c)));
  }
  return true;
}

}  // namespace detail

/// Lloyd's algorithm with k-means++ seeding and restart-on-empty-cluster.
/// `context` names the clustering in error messages (tier and channel).
inline KMeansResult kmeans(const Matrix& pts, std::size_t k, Rng& rng, const KMeansOptions& opts,
                           const std::string& context) {
  require(k >= 1, ErrorKind::validation, context + ": k must be positive");
  if (pts.rows < k)
    fail(ErrorKind::degenerate, context + ": " + std::to_string(pts.rows) +
                                    " points cannot form " + std::to_string(k) + " clusters");
  KMeansResult res;
  for (int attempt = 0; attempt <= opts.max_restarts; ++attempt) {
    res.restarts = attempt;
    if (!detail::seed_plus_plus(pts, k, rng, res.centroids)) continue;
    res.labels.assign(pts.rows, 0);
    double prev = std::numeric_limits<double>::infinity();
    bool empty = false;
    for (res.iterations = 1; res.iterations <= opts.max_iterations; ++res.iterations) {
      std::vector<std::size_t> counts(k, 0);
      res.inertia = 0.0;
      for (std::size_t i = 0; i < pts.rows; ++i) {
        const std::size_t c = nearest_row(res.centroids, pts.row(i));
        res.labels[i] = c;
        ++counts[c];
        res.inertia += squared_distance(pts.row(i), res.centroids.row(c));
      }
      for (std::size_t c = 0; c < k; ++c) empty = empty || counts[c] == 0;
      if (empty) break;
      Matrix next(k, pts.cols);
      for (std::size_t i = 0; i < pts.rows; ++i) {
        auto dst = next.row(res.labels[i]);
        auto src = pts.row(i);
        for (std::size_t d = 0; d < pts.cols; ++d) dst[d] += src[d];
      }
      for (std::size_t c = 0; c < k; ++c)
        for (double& v : next.row(c)) v /= static_cast<double>(counts[c]);
      res.centroids = std::move(next);
      const bool converged = std::abs(prev - res.inertia) <= opts.tolerance * std::abs(prev) ||
                             res.inertia == 0.0;
      prev = res.inertia;
      if (converged) break;
    }
    if (empty) continue;
    // final assignment against the updated centroids
    res.inertia = 0.0;
    std::vector<std::size_t> counts(k, 0);
    for (std::size_t i = 0; i < pts.rows; ++i) {
      res.labels[i] = nearest_row(res.centroids, pts.row(i));
      ++counts[res.labels[i]];
      res.inertia += squared_distance(pts.row(i), res.centroids.row(res.labels[i]));
    }
    bool final_empty = false;
    for (auto n : counts) final_empty = final_empty || n == 0;
    if (!final_empty) return res;
  }
  fail(ErrorKind::degenerate, context + ": empty cluster persists after " +
                                  std::to_string(opts.max_restarts) + " restarts");
}

}  // namespace partsmith
