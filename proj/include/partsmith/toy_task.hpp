// Copyright (C) 2026 The partsmith Authors
// SPDX-License-Identifier: Apache-2.0

#pragma once

// Synthetic "creature" images for desk-scale runs: a dark background, a head block
// and a body block, each drawn in one of two colour variants. Blocks align with the
// 4-pixel patch grid so each patch has a single colour.

#include <array>
#include <string>
#include <vector>

#include "partsmith/image.hpp"
#include "partsmith/rng.hpp"

namespace partsmith::toy {

inline constexpr std::size_t kImageSize = 64;
inline constexpr std::size_t kPatch = 4;
inline constexpr std::size_t kGrid = kImageSize / kPatch;

using Color = std::array<float, 3>;

inline constexpr std::array<Color, 2> kBackground = {{{0.05f, 0.08f, 0.20f}, {0.18f, 0.10f, 0.05f}}};
inline constexpr std::array<Color, 2> kHead = {{{0.95f, 0.85f, 0.20f}, {0.95f, 0.45f, 0.15f}}};
inline constexpr std::array<Color, 2> kBody = {{{0.55f, 0.90f, 0.95f}, {0.35f, 0.55f, 0.95f}}};

struct Creature {
  std::size_t background = 0;  // variant 0/1
  std::size_t head = 0;
  std::size_t body = 0;
  std::size_t offset = 0;  // horizontal shift in patches
};

inline RgbImage render(const Creature& c) {
  RgbImage img(kImageSize, kImageSize);
  img.fill_rect(0, 0, kImageSize, kImageSize, kBackground[c.background]);
  const std::size_t x0 = (2 + c.offset) * kPatch;
  img.fill_rect(3 * kPatch, x0 + 2 * kPatch, 4 * kPatch, 5 * kPatch, kHead[c.head]);
  img.fill_rect(7 * kPatch, x0, 6 * kPatch, 9 * kPatch, kBody[c.body]);
  return img;
}

/// Ground-truth part of each patch: 0 background, 1 head, 2 body.
inline std::vector<std::size_t> part_labels(const Creature& c) {
  std::vector<std::size_t> labels(kGrid * kGrid, 0);
  const std::size_t x0 = 2 + c.offset;
  for (std::size_t r = 0; r < kGrid; ++r)
    for (std::size_t col = 0; col < kGrid; ++col) {
      if (r >= 3 && r < 7 && col >= x0 + 2 && col < x0 + 7) labels[r * kGrid + col] = 1;
      if (r >= 7 && r < 13 && col >= x0 && col < x0 + 9) labels[r * kGrid + col] = 2;
    }
  return labels;
}

/// The 2x2x2 variant combinations (n = 8) with varying placement; larger n repeats
/// combinations with fresh offsets.
inline std::vector<Creature> creatures(std::size_t n = 8, std::uint64_t seed = 0) {
  Rng rng(seed);
  std::vector<Creature> out;
  for (std::size_t i = 0; i < n; ++i) {
    const std::size_t v = i % 8;
    out.push_back({v & 1u, (v >> 1) & 1u, (v >> 2) & 1u, rng.below(4)});
  }
  return out;
}

inline std::string image_id(std::size_t i) { return "toy" + std::to_string(i); }

}  // namespace partsmith::toy
