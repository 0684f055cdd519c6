// Copyright (C) 2026 The partsmith Authors
// SPDX-License-Identifier: Apache-2.0

#include <gtest/gtest.h>

#include "partsmith/discovery.hpp"
#include "synthetic.hpp"
#include "test_util.hpp"

namespace partsmith {
namespace {

// Hand-built dictionary in 3-D: background splits sit at (-10, 0, k), part 1 at
// (10, 5, k), part 2 at (10, -5, k), k = 1..8.
SubConceptDictionary handmade_dictionary() {
  SubConceptDictionary d;
  d.dim = 3;
  d.M = 2;
  d.K = 8;
  d.fgbg = Matrix(2, 3, {-10, 0, 0, 10, 0, 0});
  d.parts = Matrix(2, 3, {10, 5, 0, 10, -5, 0});
  d.splits = Matrix(3 * 8, 3);
  const double y[3] = {0, 5, -5};
  for (std::size_t m = 0; m < 3; ++m)
    for (std::size_t k = 1; k <= 8; ++k) {
      d.splits(m * 8 + k - 1, 0) = m == 0 ? -10 : 10;
      d.splits(m * 8 + k - 1, 1) = y[m];
      d.splits(m * 8 + k - 1, 2) = static_cast<double>(k);
    }
  return d;
}

void set_patch(FeatureMap& fm, std::size_t cell, std::span<const double> v) {
  for (std::size_t d = 0; d < fm.dim; ++d) fm.data[cell * fm.dim + d] = static_cast<float>(v[d]);
}

TEST(Discovery, RecoversThreeBlobLabels) {
  const auto corpus = testing::three_blob_corpus();
  const auto dict = fit_hierarchy(corpus.maps, 2, 2, 0);
  EXPECT_GE(testing::best_permutation_agreement(corpus, dict), 0.95);
}

TEST(Discovery, FitIsDeterministicUnderSeed) {
  const auto corpus = testing::three_blob_corpus(12);
  testing::TempDir a, b;
  save_dictionary(a.path(), fit_hierarchy(corpus.maps, 2, 2, 9));
  save_dictionary(b.path(), fit_hierarchy(corpus.maps, 2, 2, 9));
  for (const char* f : {"dictionary.json", "fgbg.psfm", "parts.psfm", "splits.psfm"})
    EXPECT_EQ(psfm::read_file_bytes(a.path() / f), psfm::read_file_bytes(b.path() / f)) << f;
}

TEST(Discovery, PointMassFailsAtTopTier) {
  std::vector<FeatureMap> maps(3, FeatureMap{"p", 4, 4, 2, std::vector<float>(32, 1.5f)});
  try {
    fit_hierarchy(maps, 2, 2, 0);
    FAIL() << "expected degenerate clustering";
  } catch (const Error& e) {
    EXPECT_EQ(e.kind(), ErrorKind::degenerate);
    EXPECT_NE(std::string(e.what()).find("top tier"), std::string::npos);
  }
}

TEST(Discovery, InsufficientForegroundIsCapacityError) {
  const auto corpus = testing::three_blob_corpus(1);  // 16 foreground patches
  testing::expect_error(ErrorKind::capacity, [&] { fit_hierarchy(corpus.maps, 2, 16, 0); });
}

TEST(Discovery, EmptyCorpusRejected) {
  testing::expect_error(ErrorKind::validation, [] { fit_hierarchy({}, 2, 2, 0); });
}

TEST(Discovery, BirdConfigurationShape) {
  // background ring plus five vertical part stripes, enough patches for K = 256
  Rng rng(4);
  const std::size_t grid = 32, dim = 6;
  std::vector<FeatureMap> maps;
  for (int i = 0; i < 8; ++i) {
    FeatureMap fm{"b" + std::to_string(i), grid, grid, dim, std::vector<float>(grid * grid * dim)};
    for (std::size_t r = 0; r < grid; ++r)
      for (std::size_t c = 0; c < grid; ++c) {
        const bool border = r < 4 || c < 4 || r >= grid - 4 || c >= grid - 4;
        const std::size_t part = border ? 0 : 1 + (c - 4) * 5 / (grid - 8);
        for (std::size_t d = 0; d < dim; ++d) {
          double mu = d == 0 ? (border ? -20.0 : 20.0) : 0.0;
          if (d == 1 && !border) mu = 6.0 * static_cast<double>(part);
          fm.data[(r * grid + c) * dim + d] = static_cast<float>(mu + rng.normal());
        }
      }
    maps.push_back(std::move(fm));
  }
  const auto dict = fit_hierarchy(maps, 5, 256, 0);
  EXPECT_EQ(dict.M, 5u);
  EXPECT_EQ(dict.K, 256u);
  EXPECT_EQ(dict.splits.rows, 6u * 256u);
  EXPECT_EQ(dict.splits.cols, dim);
  EXPECT_TRUE(all_finite(dict.splits.data));
}

TEST(IdentifyBackground, BorderOwnerIsBackground) {
  LabelGrid g{4, 4, std::vector<std::size_t>(16, 1)};
  for (std::size_t r = 1; r < 3; ++r)
    for (std::size_t c = 1; c < 3; ++c) g.labels[r * 4 + c] = 0;
  EXPECT_EQ(identify_background({g}), 1u);
}

TEST(IdentifyBackground, TieGoesToLargerCluster) {
  // 4x5 grid, 14 border cells split 7/7; interior 6 cells all cluster 0 => sizes 13 vs 7
  LabelGrid g{4, 5, std::vector<std::size_t>(20, 0)};
  std::size_t given = 0;
  for (std::size_t r = 0; r < 4; ++r)
    for (std::size_t c = 0; c < 5; ++c) {
      const bool border = r == 0 || c == 0 || r == 3 || c == 4;
      if (border && given < 7) {
        g.labels[r * 5 + c] = 1;
        ++given;
      }
    }
  EXPECT_EQ(identify_background({g}), 0u);
  // flip: cluster 1 becomes the larger one
  for (auto& l : g.labels) l = 1 - l;
  EXPECT_EQ(identify_background({g}), 1u);
}

TEST(IdentifyBackground, CenteredObjectCorpus) {
  const auto corpus = testing::three_blob_corpus(10);
  const auto dict = fit_hierarchy(corpus.maps, 2, 2, 3);
  // background centroid must sit on the surrounding blob (first coordinate -5)
  EXPECT_LT(dict.fgbg(0, 0), -4.0);
  EXPECT_GT(dict.fgbg(1, 0), 4.0);
}

TEST(TagImage, AllPatchesOnBackgroundSplit) {
  const auto dict = handmade_dictionary();
  FeatureMap fm{"x", 4, 4, 3, std::vector<float>(48)};
  for (std::size_t i = 0; i < 16; ++i) set_patch(fm, i, dict.split_centroid(0, 7));
  const TagResult t = tag_image(fm, dict);
  EXPECT_TRUE(t.code.pairs[0].present);
  EXPECT_EQ(t.code.pairs[0].split, 7u);
  EXPECT_FALSE(t.code.pairs[1].present);
  EXPECT_FALSE(t.code.pairs[2].present);
  EXPECT_EQ(t.code.to_string(), "(0,7)");
  EXPECT_TRUE(std::all_of(t.masks.masks[0].begin(), t.masks.masks[0].end(), [](auto v) { return v == 1; }));
}

TEST(TagImage, HalvesMatchBruteForceNearestCentroid) {
  const auto dict = handmade_dictionary();
  FeatureMap fm{"x", 4, 6, 3, std::vector<float>(72)};
  for (std::size_t r = 0; r < 4; ++r)
    for (std::size_t c = 0; c < 6; ++c)
      set_patch(fm, r * 6 + c, c < 3 ? dict.split_centroid(1, 3) : dict.split_centroid(2, 7));
  const TagResult t = tag_image(fm, dict);
  // oracle: flat nearest split centroid over all (M+1)K rows
  for (std::size_t i = 0; i < fm.patches(); ++i) {
    std::vector<double> x(fm.patch(i).begin(), fm.patch(i).end());
    std::size_t best = 0;
    for (std::size_t r = 1; r < dict.splits.rows; ++r)
      if (squared_distance(dict.splits.row(r), x) < squared_distance(dict.splits.row(best), x)) best = r;
    EXPECT_EQ(t.patch_channel[i], best / dict.K);
    EXPECT_EQ(t.patch_split[i], best % dict.K + 1);
  }
  EXPECT_EQ(t.code.to_string(), "(1,3) (2,7)");
  EXPECT_FALSE(t.code.pairs[0].present);
  for (std::size_t r = 0; r < 4; ++r)
    for (std::size_t c = 0; c < 6; ++c) {
      EXPECT_EQ(t.masks.masks[1][r * 6 + c], c < 3 ? 1 : 0);
      EXPECT_EQ(t.masks.masks[2][r * 6 + c], c < 3 ? 0 : 1);
    }
}

TEST(TagImage, MajorityTieGoesToLowerSplit) {
  const auto dict = handmade_dictionary();
  FeatureMap fm{"x", 2, 2, 3, std::vector<float>(12)};
  set_patch(fm, 0, dict.split_centroid(1, 5));
  set_patch(fm, 1, dict.split_centroid(1, 2));
  set_patch(fm, 2, dict.split_centroid(1, 5));
  set_patch(fm, 3, dict.split_centroid(1, 2));
  EXPECT_EQ(tag_image(fm, dict).code.pairs[1].split, 2u);
}

TEST(TagImage, DimensionMismatchRejected) {
  FeatureMap fm{"x", 2, 2, 4, std::vector<float>(16)};
  testing::expect_error(ErrorKind::validation, [&] { tag_image(fm, handmade_dictionary()); });
}

TEST(TagImage, InvariantsAndIdempotenceOnRandomMaps) {
  const auto corpus = testing::three_blob_corpus(8);
  const auto dict = fit_hierarchy(corpus.maps, 2, 2, 1);
  Rng rng(8);
  for (int trial = 0; trial < 200; ++trial) {
    FeatureMap fm{"r", 2 + rng.below(7), 2 + rng.below(7), 8, {}};
    fm.data.resize(fm.patches() * 8);
    for (float& v : fm.data) v = static_cast<float>(6.0 * rng.normal());
    const TagResult t = tag_image(fm, dict);
    ASSERT_TRUE(masks_consistent(t.masks));
    ASSERT_EQ(tag_image(fm, dict).code, t.code);
    ASSERT_EQ(tag_image(fm, dict).masks, t.masks);
    std::size_t covered = 0;
    for (const auto& m : t.masks.masks) covered += static_cast<std::size_t>(std::count(m.begin(), m.end(), 1));
    ASSERT_EQ(covered, fm.patches());
    for (std::size_t m = 0; m < 3; ++m) ASSERT_EQ(t.code.pairs[m].present, t.masks.present[m]);
  }
}

TEST(DownsampleMasks, IdentityAndHalves) {
  std::vector<std::size_t> labels(32 * 32);
  for (std::size_t r = 0; r < 32; ++r)
    for (std::size_t c = 0; c < 32; ++c) labels[r * 32 + c] = c < 16 ? 1 : 2;
  const auto pm = PartMaskSet::from_labels(32, 32, 3, labels);
  EXPECT_EQ(downsample_masks(pm, 32, 32), pm);
  const auto small = downsample_masks(pm, 16, 16);
  for (std::size_t r = 0; r < 16; ++r)
    for (std::size_t c = 0; c < 16; ++c) EXPECT_EQ(small.masks[1][r * 16 + c], c < 8 ? 1 : 0);
  EXPECT_FALSE(small.present[0]);
}

TEST(DownsampleMasks, RandomMasksStayDisjointAndCovering) {
  for (std::uint64_t seed = 0; seed < 500; ++seed) {
    Rng rng(seed);
    const std::size_t channels = 2 + rng.below(5);
    std::vector<std::size_t> labels(32 * 32);
    for (auto& l : labels) l = rng.below(channels);
    const auto out = downsample_masks(PartMaskSet::from_labels(32, 32, channels, labels), 16, 16);
    // exhaustive per-cell check
    for (std::size_t i = 0; i < out.cells(); ++i) {
      int owners = 0;
      for (const auto& m : out.masks) owners += m[i];
      ASSERT_EQ(owners, 1);
    }
    for (std::size_t m = 0; m < channels; ++m)
      ASSERT_EQ(out.present[m], std::count(out.masks[m].begin(), out.masks[m].end(), 1) > 0);
  }
}

TEST(DownsampleMasks, VanishingPartBecomesAbsent) {
  std::vector<std::size_t> labels(8 * 8, 0);
  labels[0] = 1;  // single cell, not sampled at 2x2 (samples cells 2 and 6)
  const auto out = downsample_masks(PartMaskSet::from_labels(8, 8, 2, labels), 2, 2);
  EXPECT_FALSE(out.present[1]);
  EXPECT_TRUE(masks_consistent(out));
}

TEST(DictionaryIo, RoundTripAndChecksum) {
  const auto corpus = testing::three_blob_corpus(6);
  const auto dict = fit_hierarchy(corpus.maps, 2, 2, 1, {}, "blobs");
  testing::TempDir dir;
  save_dictionary(dir.path(), dict);
  const auto back = load_dictionary(dir.path());
  EXPECT_EQ(back.splits, dict.splits);
  EXPECT_EQ(back.parts, dict.parts);
  EXPECT_EQ(back.fgbg, dict.fgbg);
  EXPECT_EQ(back.dataset_name, "blobs");
  auto bytes = psfm::read_file_bytes(dir.path() / "splits.psfm");
  bytes[bytes.size() - 1] ^= 1;
  psfm::write_file_bytes(dir.path() / "splits.psfm", bytes);
  testing::expect_error(ErrorKind::corruption, [&] { load_dictionary(dir.path()); });
}

TEST(PromptCodeJson, RoundTripKeepsAbsence) {
  PromptCode c = make_code(3);
  c.pairs[0] = {0, 4, true};
  c.pairs[2] = {2, 9, true};
  EXPECT_EQ(code_from_json(code_to_json(c)), c);
  EXPECT_EQ(code_to_json(c)["text"], "(0,4) (2,9)");
}

}  // namespace
}  // namespace partsmith
