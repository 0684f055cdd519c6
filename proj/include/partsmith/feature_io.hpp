// Copyright (C) 2026 The partsmith Authors
// SPDX-License-Identifier: Apache-2.0

#pragma once

#include <cmath>
#include <cstdint>
#include <filesystem>
#include <numbers>
#include <set>
#include <span>
#include <string>
#include <vector>

#include <nlohmann/json.hpp>

#include "partsmith/error.hpp"
#include "partsmith/image.hpp"
#include "partsmith/psfm.hpp"

namespace partsmith {

/// Grid of patch feature vectors for one image, row-major grid_h x grid_w x dim.
struct FeatureMap {
  std::string image_id;
  std::size_t grid_h = 0;
  std::size_t grid_w = 0;
  std::size_t dim = 0;
  std::vector<float> data;

  std::size_t patches() const { return grid_h * grid_w; }
  std::span<const float> patch(std::size_t i) const { return {data.data() + i * dim, dim}; }
  std::span<float> patch(std::size_t i) { return {data.data() + i * dim, dim}; }
  std::span<const float> patch(std::size_t r, std::size_t c) const { return patch(r * grid_w + c); }

  bool operator==(const FeatureMap&) const = default;
};

inline void validate(const FeatureMap& fm) {
  require(fm.grid_h >= 2 && fm.grid_w >= 2, ErrorKind::validation,
          "feature map grid must be at least 2x2");
  require(fm.dim >= 1, ErrorKind::validation, "feature dimension must be positive");
  require(fm.data.size() == fm.grid_h * fm.grid_w * fm.dim, ErrorKind::corruption,
          "feature map data length does not match grid_h*grid_w*dim");
  for (float v : fm.data)
    require(std::isfinite(v), ErrorKind::validation, "feature map contains non-finite values");
}

inline std::string encode_feature_map(const FeatureMap& fm) {
  validate(fm);
  return psfm::encode({static_cast<std::uint32_t>(fm.grid_h), static_cast<std::uint32_t>(fm.grid_w),
                       static_cast<std::uint32_t>(fm.dim), fm.data});
}

inline FeatureMap decode_feature_map(std::string_view bytes, std::string image_id) {
  std::size_t used = 0;
  psfm::Block block = psfm::decode(bytes, &used);
  if (used != bytes.size()) fail(ErrorKind::corruption, "trailing bytes after feature payload");
  FeatureMap fm{std::move(image_id), block.grid_h, block.grid_w, block.dim, std::move(block.values)};
  validate(fm);
  return fm;
}

inline void write_feature_map(const std::filesystem::path& path, const FeatureMap& fm) {
  psfm::write_file_bytes(path, encode_feature_map(fm));
}

/// Reads a feature file; the image id defaults to the file stem.
inline FeatureMap read_feature_map(const std::filesystem::path& path) {
  return decode_feature_map(psfm::read_file_bytes(path), path.stem().string());
}

struct ManifestRecord {
  std::string image_id;
  std::string path;  // relative to the manifest directory
  std::size_t grid_h = 0;
  std::size_t grid_w = 0;
  std::size_t dim = 0;
};

inline void to_json(nlohmann::json& j, const ManifestRecord& r) {
  j = {{"image_id", r.image_id}, {"path", r.path}, {"grid_h", r.grid_h}, {"grid_w", r.grid_w},
       {"dim", r.dim}};
}

inline void from_json(const nlohmann::json& j, ManifestRecord& r) {
  j.at("image_id").get_to(r.image_id);
  j.at("path").get_to(r.path);
  j.at("grid_h").get_to(r.grid_h);
  j.at("grid_w").get_to(r.grid_w);
  j.at("dim").get_to(r.dim);
}

/// A directory of feature files described by manifest.json.
struct FeatureCorpus {
  std::string dataset_name;
  std::filesystem::path root;
  std::vector<ManifestRecord> manifest;

  std::size_t dim() const { return manifest.empty() ? 0 : manifest.front().dim; }

  FeatureMap load(std::size_t i) const {
    FeatureMap fm = read_feature_map(root / manifest[i].path);
    fm.image_id = manifest[i].image_id;
    require(fm.grid_h == manifest[i].grid_h && fm.grid_w == manifest[i].grid_w &&
                fm.dim == manifest[i].dim,
            ErrorKind::corruption, "feature file " + manifest[i].path + " disagrees with manifest");
    return fm;
  }

  std::vector<FeatureMap> load_all() const {
    std::vector<FeatureMap> maps;
    maps.reserve(manifest.size());
    for (std::size_t i = 0; i < manifest.size(); ++i) maps.push_back(load(i));
    return maps;
  }
};

inline void validate(const FeatureCorpus& corpus) {
  std::set<std::string> ids;
  for (const auto& r : corpus.manifest) {
    require(ids.insert(r.image_id).second, ErrorKind::validation,
            "duplicate image_id in manifest: " + r.image_id);
    require(r.dim == corpus.manifest.front().dim, ErrorKind::validation,
            "manifest entries disagree on feature dimension");
  }
}

inline constexpr const char* kManifestName = "manifest.json";

inline void write_manifest(const FeatureCorpus& corpus) {
  validate(corpus);
  nlohmann::json j = {{"dataset_name", corpus.dataset_name}, {"records", corpus.manifest}};
  psfm::write_file_bytes(corpus.root / kManifestName, j.dump(2) + "\n");
}

inline FeatureCorpus read_corpus(const std::filesystem::path& dir) {
  const auto text = psfm::read_file_bytes(dir / kManifestName);
  nlohmann::json j;
  try {
    j = nlohmann::json::parse(text);
  } catch (const nlohmann::json::exception& e) {
    fail(ErrorKind::format, "malformed feature manifest: " + std::string(e.what()));
  }
  FeatureCorpus corpus;
  corpus.root = dir;
  corpus.dataset_name = j.value("dataset_name", "");
  corpus.manifest = j.at("records").get<std::vector<ManifestRecord>>();
  validate(corpus);
  return corpus;
}

/// Writes maps as <id>.psfm next to a manifest and returns the corpus.
inline FeatureCorpus write_corpus(const std::filesystem::path& dir, const std::string& dataset_name,
                                  const std::vector<FeatureMap>& maps) {
  FeatureCorpus corpus{dataset_name, dir, {}};
  for (const auto& fm : maps) {
    const std::string rel = fm.image_id + ".psfm";
    write_feature_map(dir / rel, fm);
    corpus.manifest.push_back({fm.image_id, rel, fm.grid_h, fm.grid_w, fm.dim});
  }
  write_manifest(corpus);
  return corpus;
}

/// Boundary to a patch-feature backbone. Implementations declare their patch geometry.
class ExtractorAdapter {
 public:
  virtual ~ExtractorAdapter() = default;
  virtual std::string name() const = 0;
  virtual std::size_t patch_size() const = 0;
  virtual std::size_t dim() const = 0;
  virtual bool available() const { return true; }
  /// Features for the full patch grid; the image is already validated against the geometry.
  virtual FeatureMap compute(const RgbImage& image, std::size_t grid_h, std::size_t grid_w) const = 0;
};

inline FeatureMap extract_features(const RgbImage& image, const ExtractorAdapter& adapter,
                                   std::string image_id = {}) {
  if (!adapter.available())
    fail(ErrorKind::dependency, "feature extractor '" + adapter.name() + "' is unavailable");
  require(image.pixels.size() == image.width * image.height * 3, ErrorKind::validation,
          "image buffer size does not match its geometry");
  const std::size_t p = adapter.patch_size();
  FeatureMap fm = adapter.compute(image, image.height / p, image.width / p);
  fm.image_id = std::move(image_id);
  validate(fm);
  return fm;
}

namespace detail {

inline std::uint64_t splitmix64(std::uint64_t x) {
  x += 0x9E3779B97F4A7C15ull;
  x = (x ^ (x >> 30)) * 0xBF58476D1CE4E5B9ull;
  x = (x ^ (x >> 27)) * 0x94D049BB133111EBull;
  return x ^ (x >> 31);
}

inline double unit_from_hash(std::uint64_t h) { return static_cast<double>(h >> 11) * 0x1.0p-53; }

}  // namespace detail

/// Deterministic dependency-free extractor: each output dimension is a seeded random
/// Fourier feature cos(w_d . c + b_d) of the patch mean colour c.
class StubExtractor final : public ExtractorAdapter {
 public:
  StubExtractor(std::size_t dim = 32, std::size_t patch = 4, std::uint64_t seed = 0)
      : dim_(dim), patch_(patch), seed_(seed), weights_(dim * 3), phases_(dim) {
    require(dim >= 1 && patch >= 1, ErrorKind::validation, "stub extractor needs dim, patch >= 1");
    std::uint64_t state = detail::splitmix64(seed ^ 0x5053464Dull);
    for (std::size_t d = 0; d < dim; ++d) {
      for (std::size_t c = 0; c < 3; ++c) {
        state = detail::splitmix64(state);
        weights_[d * 3 + c] = (2.0 * detail::unit_from_hash(state) - 1.0) * kFrequency;
      }
      state = detail::splitmix64(state);
      phases_[d] = 2.0 * std::numbers::pi * detail::unit_from_hash(state);
    }
  }

  std::string name() const override { return "stub"; }
  std::size_t patch_size() const override { return patch_; }
  std::size_t dim() const override { return dim_; }
  std::uint64_t seed() const { return seed_; }

  /// Feature vector for one mean colour.
  std::vector<float> embed_color(const std::array<double, 3>& rgb) const {
    std::vector<float> f(dim_);
    for (std::size_t d = 0; d < dim_; ++d) {
      const double arg = weights_[d * 3] * rgb[0] + weights_[d * 3 + 1] * rgb[1] +
                         weights_[d * 3 + 2] * rgb[2] + phases_[d];
      f[d] = static_cast<float>(std::cos(arg));
    }
    return f;
  }

  FeatureMap compute(const RgbImage& image, std::size_t grid_h, std::size_t grid_w) const override {
    FeatureMap fm{{}, grid_h, grid_w, dim_, std::vector<float>(grid_h * grid_w * dim_)};
    const double inv = 1.0 / static_cast<double>(patch_ * patch_);
    for (std::size_t gy = 0; gy < grid_h; ++gy) {
      for (std::size_t gx = 0; gx < grid_w; ++gx) {
        std::array<double, 3> mean{};
        for (std::size_t y = gy * patch_; y < (gy + 1) * patch_; ++y)
          for (std::size_t x = gx * patch_; x < (gx + 1) * patch_; ++x)
            for (std::size_t c = 0; c < 3; ++c) mean[c] += image.at(y, x, c);
        for (double& m : mean) m *= inv;
        const auto f = embed_color(mean);
        std::copy(f.begin(), f.end(), fm.patch(gy * grid_w + gx).begin());
      }
    }
    return fm;
  }

  static constexpr double kFrequency = 2.0;

 private:
  std::size_t dim_;
  std::size_t patch_;
  std::uint64_t seed_;
  std::vector<double> weights_;
  std::vector<double> phases_;
};

}  // namespace partsmith
