// Copyright (C) 2026 The partsmith Authors
// SPDX-License-Identifier: Apache-2.0

#pragma once

// Three-tier sub-concept discovery over pooled patch features:
//   top     2-means over every patch -> background / foreground
//   middle  M-means over foreground patches -> part channels 1..M
//   bottom  K-means inside each channel (background is channel 0) -> splits 1..K
// Tagging assigns every patch of a map to one (channel, split) pair and derives the
// per-channel prompt code and part masks.

#include <algorithm>
#include <cstdint>
#include <filesystem>
#include <sstream>
#include <string>
#include <vector>

#include <nlohmann/json.hpp>

#include "partsmith/checksum.hpp"
#include "partsmith/error.hpp"
#include "partsmith/feature_io.hpp"
#include "partsmith/kmeans.hpp"
#include "partsmith/matrix.hpp"
#include "partsmith/psfm.hpp"
#include "partsmith/rng.hpp"

namespace partsmith {

inline constexpr std::size_t kBackgroundChannel = 0;

struct SubConceptDictionary {
  std::size_t dim = 0;
  std::size_t M = 0;
  std::size_t K = 0;
  Matrix fgbg;    // 2 x dim; row 0 background, row 1 foreground
  Matrix parts;   // M x dim
  Matrix splits;  // (M+1)*K x dim; row m*K + (k-1)
  std::string dataset_name;
  std::uint64_t seed = 0;
  KMeansOptions kmeans;
  nlohmann::json metadata = nlohmann::json::object();

  std::size_t channels() const { return M + 1; }
  std::span<const double> split_centroid(std::size_t m, std::size_t k) const {
    return splits.row(m * K + (k - 1));
  }
};

struct CodePair {
  std::size_t channel = 0;
  std::size_t split = 0;  // 1..K when present
  bool present = false;

  bool operator==(const CodePair&) const = default;
};

/// One pair per channel 0..M, in channel order.
struct PromptCode {
  std::vector<CodePair> pairs;

  std::size_t channels() const { return pairs.size(); }
  std::size_t present_count() const {
    return static_cast<std::size_t>(
        std::count_if(pairs.begin(), pairs.end(), [](const CodePair& p) { return p.present; }));
  }

  /// "(0,k0) (1,k1) ... (M,kM)" over present channels.
  std::string to_string() const {
    std::ostringstream out;
    bool first = true;
    for (const auto& p : pairs) {
      if (!p.present) continue;
      if (!first) out << ' ';
      out << '(' << p.channel << ',' << p.split << ')';
      first = false;
    }
    return out.str();
  }

  bool operator==(const PromptCode&) const = default;
};

inline PromptCode make_code(std::size_t M) {
  PromptCode code;
  for (std::size_t m = 0; m <= M; ++m) code.pairs.push_back({m, 0, false});
  return code;
}

inline void validate(const PromptCode& code, std::size_t M, std::size_t K) {
  require(code.pairs.size() == M + 1, ErrorKind::validation,
          "prompt code must carry exactly one pair per channel (" + std::to_string(M + 1) + ")");
  for (std::size_t m = 0; m < code.pairs.size(); ++m) {
    const auto& p = code.pairs[m];
    require(p.channel == m, ErrorKind::validation, "prompt code channels must be 0..M in order");
    if (p.present)
      require(p.split >= 1 && p.split <= K, ErrorKind::validation,
              "split " + std::to_string(p.split) + " of channel " + std::to_string(m) +
                  " outside 1.." + std::to_string(K));
  }
}

inline nlohmann::json code_to_json(const PromptCode& code) {
  nlohmann::json pairs = nlohmann::json::array();
  for (const auto& p : code.pairs)
    if (p.present) pairs.push_back({{"channel", p.channel}, {"split", p.split}});
  return {{"M", code.pairs.empty() ? 0 : code.pairs.size() - 1}, {"pairs", pairs},
          {"text", code.to_string()}};
}

inline PromptCode code_from_json(const nlohmann::json& j) {
  try {
    const auto M = j.at("M").get<std::size_t>();
    PromptCode code = make_code(M);
    for (const auto& p : j.at("pairs")) {
      const auto m = p.at("channel").get<std::size_t>();
      require(m <= M, ErrorKind::validation, "channel " + std::to_string(m) + " exceeds M");
      require(!code.pairs[m].present, ErrorKind::validation,
              "channel " + std::to_string(m) + " listed twice");
      code.pairs[m].split = p.at("split").get<std::size_t>();
      code.pairs[m].present = true;
    }
    return code;
  } catch (const nlohmann::json::exception& e) {
    fail(ErrorKind::validation, std::string("malformed prompt code: ") + e.what());
  }
}

/// Binary masks per channel on a grid. Masks partition the grid.
struct PartMaskSet {
  std::size_t grid_h = 0;
  std::size_t grid_w = 0;
  std::vector<std::vector<std::uint8_t>> masks;  // channels x (grid_h*grid_w)
  std::vector<bool> present;

  std::size_t channels() const { return masks.size(); }
  std::size_t cells() const { return grid_h * grid_w; }

  /// Channel owning each cell.
  std::vector<std::size_t> label_grid() const {
    std::vector<std::size_t> labels(cells(), 0);
    for (std::size_t m = 0; m < masks.size(); ++m)
      for (std::size_t i = 0; i < cells(); ++i)
        if (masks[m][i]) labels[i] = m;
    return labels;
  }

  static PartMaskSet from_labels(std::size_t h, std::size_t w, std::size_t channels,
                                 const std::vector<std::size_t>& labels) {
    PartMaskSet pm{h, w, std::vector<std::vector<std::uint8_t>>(channels,
                                                                std::vector<std::uint8_t>(h * w, 0)),
                   std::vector<bool>(channels, false)};
    for (std::size_t i = 0; i < h * w; ++i) {
      pm.masks[labels[i]][i] = 1;
      pm.present[labels[i]] = true;
    }
    return pm;
  }

  bool operator==(const PartMaskSet&) const = default;
};

/// Disjointness, full coverage, and presence <=> non-empty.
inline bool masks_consistent(const PartMaskSet& pm) {
  for (std::size_t i = 0; i < pm.cells(); ++i) {
    int owners = 0;
    for (const auto& mask : pm.masks) owners += mask[i] ? 1 : 0;
    if (owners != 1) return false;
  }
  for (std::size_t m = 0; m < pm.channels(); ++m) {
    const bool any = std::any_of(pm.masks[m].begin(), pm.masks[m].end(),
                                 [](std::uint8_t v) { return v != 0; });
    if (any != pm.present[m]) return false;
  }
  return true;
}

/// Nearest-neighbour resampling of categorical masks.
inline PartMaskSet downsample_masks(const PartMaskSet& pm, std::size_t target_h, std::size_t target_w) {
  require(target_h >= 2 && target_w >= 2, ErrorKind::validation, "mask target must be at least 2x2");
  const auto src = pm.label_grid();
  std::vector<std::size_t> dst(target_h * target_w);
  for (std::size_t r = 0; r < target_h; ++r) {
    const std::size_t sr = std::min(pm.grid_h - 1, ((2 * r + 1) * pm.grid_h) / (2 * target_h));
    for (std::size_t c = 0; c < target_w; ++c) {
      const std::size_t sc = std::min(pm.grid_w - 1, ((2 * c + 1) * pm.grid_w) / (2 * target_w));
      dst[r * target_w + c] = src[sr * pm.grid_w + sc];
    }
  }
  return PartMaskSet::from_labels(target_h, target_w, pm.channels(), dst);
}

inline PartMaskSet flip_masks_horizontal(const PartMaskSet& pm) {
  PartMaskSet out = pm;
  for (std::size_t m = 0; m < pm.channels(); ++m)
    for (std::size_t r = 0; r < pm.grid_h; ++r)
      for (std::size_t c = 0; c < pm.grid_w; ++c)
        out.masks[m][r * pm.grid_w + c] = pm.masks[m][r * pm.grid_w + (pm.grid_w - 1 - c)];
  return out;
}

struct LabelGrid {
  std::size_t grid_h = 0;
  std::size_t grid_w = 0;
  std::vector<std::size_t> labels;  // 0 or 1
};

/// Picks the background among the two top-tier clusters: the higher mean fraction of
/// image-border patches wins; ties go to the larger cluster, then to cluster 0.
inline std::size_t identify_background(const std::vector<LabelGrid>& grids) {
  require(!grids.empty(), ErrorKind::validation, "no label grids");
  double occupancy[2] = {0.0, 0.0};
  std::size_t sizes[2] = {0, 0};
  for (const auto& g : grids) {
    std::size_t border = 0, owned[2] = {0, 0};
    for (std::size_t r = 0; r < g.grid_h; ++r) {
      for (std::size_t c = 0; c < g.grid_w; ++c) {
        const std::size_t lab = g.labels[r * g.grid_w + c];
        require(lab < 2, ErrorKind::validation, "top-tier labels must be 0 or 1");
        ++sizes[lab];
        if (r == 0 || c == 0 || r + 1 == g.grid_h || c + 1 == g.grid_w) {
          ++border;
          ++owned[lab];
        }
      }
    }
    for (int k = 0; k < 2; ++k)
      occupancy[k] += static_cast<double>(owned[k]) / static_cast<double>(border);
  }
  require(sizes[0] > 0 && sizes[1] > 0, ErrorKind::degenerate, "top tier: a cluster is empty");
  if (occupancy[0] != occupancy[1]) return occupancy[0] > occupancy[1] ? 0 : 1;
  return sizes[1] > sizes[0] ? 1 : 0;
}

namespace detail {

inline Matrix rows_to_matrix(const std::vector<FeatureMap>& maps, std::size_t dim) {
  std::size_t n = 0;
  for (const auto& fm : maps) n += fm.patches();
  Matrix pts(n, dim);
  std::size_t i = 0;
  for (const auto& fm : maps)
    for (float v : fm.data) pts.data[i++] = v;
  return pts;
}

inline Matrix select_rows(const Matrix& pts, const std::vector<std::size_t>& idx) {
  Matrix out(idx.size(), pts.cols);
  for (std::size_t i = 0; i < idx.size(); ++i)
    std::copy(pts.row(idx[i]).begin(), pts.row(idx[i]).end(), out.row(i).begin());
  return out;
}

// Centroids are stored as float32 on disk; keep in-memory values identical.
inline void round_to_float(Matrix& m) {
  for (double& v : m.data) v = static_cast<double>(static_cast<float>(v));
}

}  // namespace detail

inline SubConceptDictionary fit_hierarchy(const std::vector<FeatureMap>& maps, std::size_t M,
                                          std::size_t K, std::uint64_t seed,
                                          const KMeansOptions& opts = {},
                                          const std::string& dataset_name = {}) {
  require(!maps.empty(), ErrorKind::validation, "feature corpus is empty");
  require(M >= 1 && K >= 1, ErrorKind::validation, "M and K must be at least 1");
  const std::size_t dim = maps.front().dim;
  for (const auto& fm : maps) {
    validate(fm);
    require(fm.dim == dim, ErrorKind::validation, "feature maps disagree on dimension");
  }

  Rng rng(seed);
  const Matrix pts = detail::rows_to_matrix(maps, dim);

  KMeansResult top = kmeans(pts, 2, rng, opts, "top tier (foreground/background)");
  std::vector<LabelGrid> grids;
  std::size_t offset = 0;
  for (const auto& fm : maps) {
    LabelGrid g{fm.grid_h, fm.grid_w, {}};
    g.labels.assign(top.labels.begin() + offset, top.labels.begin() + offset + fm.patches());
    offset += fm.patches();
    grids.push_back(std::move(g));
  }
  const std::size_t bg = identify_background(grids);

  std::vector<std::size_t> fg_idx, bg_idx;
  for (std::size_t i = 0; i < pts.rows; ++i) (top.labels[i] == bg ? bg_idx : fg_idx).push_back(i);
  if (fg_idx.size() < M * K)
    fail(ErrorKind::capacity, std::to_string(fg_idx.size()) + " foreground patches cannot support M*K=" +
                                  std::to_string(M * K) + " sub-concepts");

  const Matrix fg_pts = detail::select_rows(pts, fg_idx);
  KMeansResult mid = kmeans(fg_pts, M, rng, opts, "middle tier (parts)");

  SubConceptDictionary dict;
  dict.dim = dim;
  dict.M = M;
  dict.K = K;
  dict.seed = seed;
  dict.kmeans = opts;
  dict.dataset_name = dataset_name;
  dict.fgbg = Matrix(2, dim);
  std::copy(top.centroids.row(bg).begin(), top.centroids.row(bg).end(), dict.fgbg.row(0).begin());
  std::copy(top.centroids.row(1 - bg).begin(), top.centroids.row(1 - bg).end(),
            dict.fgbg.row(1).begin());
  dict.parts = mid.centroids;
  dict.splits = Matrix((M + 1) * K, dim);

  std::vector<std::vector<std::size_t>> members(M + 1);
  members[kBackgroundChannel] = bg_idx;
  for (std::size_t i = 0; i < fg_idx.size(); ++i) members[1 + mid.labels[i]].push_back(fg_idx[i]);
  for (std::size_t m = 0; m <= M; ++m) {
    const Matrix channel_pts = detail::select_rows(pts, members[m]);
    KMeansResult bottom =
        kmeans(channel_pts, K, rng, opts, "bottom tier, channel " + std::to_string(m));
    for (std::size_t k = 0; k < K; ++k)
      std::copy(bottom.centroids.row(k).begin(), bottom.centroids.row(k).end(),
                dict.splits.row(m * K + k).begin());
  }
  detail::round_to_float(dict.fgbg);
  detail::round_to_float(dict.parts);
  detail::round_to_float(dict.splits);
  return dict;
}

struct TagResult {
  PromptCode code;
  PartMaskSet masks;
  std::vector<std::size_t> patch_channel;
  std::vector<std::size_t> patch_split;  // 1..K
};

inline TagResult tag_image(const FeatureMap& fm, const SubConceptDictionary& dict) {
  require(fm.dim == dict.dim, ErrorKind::validation,
          "feature dimension " + std::to_string(fm.dim) + " does not match dictionary dimension " +
              std::to_string(dict.dim));
  validate(fm);
  const std::size_t n = fm.patches();
  TagResult out;
  out.patch_channel.resize(n);
  out.patch_split.resize(n);
  std::vector<std::vector<std::size_t>> votes(dict.channels(), std::vector<std::size_t>(dict.K, 0));
  std::vector<double> x(fm.dim);
  for (std::size_t i = 0; i < n; ++i) {
    const auto p = fm.patch(i);
    std::copy(p.begin(), p.end(), x.begin());
    std::size_t channel = kBackgroundChannel;
    if (nearest_row(dict.fgbg, x) == 1) channel = 1 + nearest_row(dict.parts, x);
    std::size_t best = 0;
    double best_d = std::numeric_limits<double>::infinity();
    for (std::size_t k = 0; k < dict.K; ++k) {
      const double d = squared_distance(dict.splits.row(channel * dict.K + k), x);
      if (d < best_d) {
        best_d = d;
        best = k;
      }
    }
    out.patch_channel[i] = channel;
    out.patch_split[i] = best + 1;
    ++votes[channel][best];
  }
  out.code = make_code(dict.M);
  for (std::size_t m = 0; m < dict.channels(); ++m) {
    const auto it = std::max_element(votes[m].begin(), votes[m].end());  // first max = lowest split
    if (*it == 0) continue;
    out.code.pairs[m].split = static_cast<std::size_t>(it - votes[m].begin()) + 1;
    out.code.pairs[m].present = true;
  }
  out.masks = PartMaskSet::from_labels(fm.grid_h, fm.grid_w, dict.channels(), out.patch_channel);
  return out;
}

// ---- persistence ------------------------------------------------------------

inline constexpr const char* kDictionaryFile = "dictionary.json";

inline std::string dictionary_checksum(const std::string& fgbg, const std::string& parts,
                                       const std::string& splits) {
  return sha256_hex(fgbg + parts + splits);
}

inline void save_dictionary(const std::filesystem::path& dir, const SubConceptDictionary& d) {
  const auto D = static_cast<std::uint32_t>(d.dim);
  const std::string fgbg = psfm::encode(psfm::from_doubles(2, 1, D, d.fgbg.data));
  const std::string parts =
      psfm::encode(psfm::from_doubles(static_cast<std::uint32_t>(d.M), 1, D, d.parts.data));
  const std::string splits = psfm::encode(psfm::from_doubles(
      static_cast<std::uint32_t>(d.M + 1), static_cast<std::uint32_t>(d.K), D, d.splits.data));
  psfm::write_file_bytes(dir / "fgbg.psfm", fgbg);
  psfm::write_file_bytes(dir / "parts.psfm", parts);
  psfm::write_file_bytes(dir / "splits.psfm", splits);
  nlohmann::json j = {
      {"format", "partsmith-dictionary"},
      {"version", 1},
      {"dim", d.dim},
      {"M", d.M},
      {"K", d.K},
      {"background_channel_index", kBackgroundChannel},
      {"seed", d.seed},
      {"dataset_name", d.dataset_name},
      {"kmeans", d.kmeans},
      {"metadata", d.metadata},
      {"blocks", {{"fgbg", "fgbg.psfm"}, {"parts", "parts.psfm"}, {"splits", "splits.psfm"}}},
      {"checksum", dictionary_checksum(fgbg, parts, splits)},
  };
  psfm::write_file_bytes(dir / kDictionaryFile, j.dump(2) + "\n");
}

inline std::string dictionary_checksum(const std::filesystem::path& dir) {
  const auto j = nlohmann::json::parse(psfm::read_file_bytes(dir / kDictionaryFile));
  return j.at("checksum").get<std::string>();
}

inline SubConceptDictionary load_dictionary(const std::filesystem::path& dir) {
  nlohmann::json j;
  try {
    j = nlohmann::json::parse(psfm::read_file_bytes(dir / kDictionaryFile));
  } catch (const nlohmann::json::exception& e) {
    fail(ErrorKind::format, std::string("malformed dictionary manifest: ") + e.what());
  }
  require(j.value("format", "") == "partsmith-dictionary" && j.value("version", 0) == 1,
          ErrorKind::format, "unsupported dictionary manifest");
  SubConceptDictionary d;
  d.dim = j.at("dim").get<std::size_t>();
  d.M = j.at("M").get<std::size_t>();
  d.K = j.at("K").get<std::size_t>();
  d.seed = j.at("seed").get<std::uint64_t>();
  d.dataset_name = j.value("dataset_name", "");
  d.kmeans = j.at("kmeans").get<KMeansOptions>();
  d.metadata = j.value("metadata", nlohmann::json::object());
  const auto& blocks = j.at("blocks");
  const std::string fgbg = psfm::read_file_bytes(dir / blocks.at("fgbg").get<std::string>());
  const std::string parts = psfm::read_file_bytes(dir / blocks.at("parts").get<std::string>());
  const std::string splits = psfm::read_file_bytes(dir / blocks.at("splits").get<std::string>());
  require(dictionary_checksum(fgbg, parts, splits) == j.at("checksum").get<std::string>(),
          ErrorKind::corruption, "dictionary checksum mismatch");
  auto load = [&](const std::string& bytes, std::size_t rows, const char* what) {
    const psfm::Block b = psfm::decode(bytes);
    require(static_cast<std::size_t>(b.grid_h) * b.grid_w == rows && b.dim == d.dim,
            ErrorKind::corruption, std::string("dictionary block shape mismatch: ") + what);
    return Matrix(rows, d.dim, psfm::to_doubles(b));
  };
  d.fgbg = load(fgbg, 2, "fgbg");
  d.parts = load(parts, d.M, "parts");
  d.splits = load(splits, (d.M + 1) * d.K, "splits");
  for (const Matrix* m : {&d.fgbg, &d.parts, &d.splits})
    require(all_finite(m->data), ErrorKind::validation, "dictionary contains non-finite centroids");
  return d;
}

}  // namespace partsmith
