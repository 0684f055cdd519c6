// Copyright (C) 2026 The partsmith Authors
// SPDX-License-Identifier: Apache-2.0

#pragma once

// PSFM tensor blocks. Layout (all little-endian):
//   magic   "PSFM"            4 bytes
//   version u8 = 1            1 byte
//   grid_h  u32               4 bytes
//   grid_w  u32               4 bytes
//   dim     u32               4 bytes
//   values  f32[grid_h*grid_w*dim], row-major
// Feature maps, centroid tables, checkpoint parameters and wire payloads all use it.

#include <array>
#include <bit>
#include <cstdint>
#include <cstring>
#include <filesystem>
#include <fstream>
#include <span>
#include <string>
#include <string_view>
#include <vector>

#include "partsmith/error.hpp"

namespace partsmith::psfm {

inline constexpr std::array<char, 4> kMagic = {'P', 'S', 'F', 'M'};
inline constexpr std::uint8_t kVersion = 1;
inline constexpr std::size_t kHeaderSize = 4 + 1 + 3 * 4;

struct Block {
  std::uint32_t grid_h = 0;
  std::uint32_t grid_w = 0;
  std::uint32_t dim = 0;
  std::vector<float> values;

  std::size_t expected_size() const {
    return static_cast<std::size_t>(grid_h) * grid_w * dim;
  }
  bool operator==(const Block&) const = default;
};

namespace detail {

inline void put_u32(std::string& out, std::uint32_t v) {
  for (int i = 0; i < 4; ++i) out.push_back(static_cast<char>((v >> (8 * i)) & 0xFFu));
}

inline std::uint32_t get_u32(const unsigned char* p) {
  return static_cast<std::uint32_t>(p[0]) | (static_cast<std::uint32_t>(p[1]) << 8) |
         (static_cast<std::uint32_t>(p[2]) << 16) | (static_cast<std::uint32_t>(p[3]) << 24);
}

}  // namespace detail

inline std::string encode(const Block& block) {
  require(block.values.size() == block.expected_size(), ErrorKind::validation,
          "PSFM block value count does not match its shape");
  std::string out;
  out.reserve(kHeaderSize + 4 * block.values.size());
  out.append(kMagic.data(), kMagic.size());
  out.push_back(static_cast<char>(kVersion));
  detail::put_u32(out, block.grid_h);
  detail::put_u32(out, block.grid_w);
  detail::put_u32(out, block.dim);
  for (float f : block.values) detail::put_u32(out, std::bit_cast<std::uint32_t>(f));
  return out;
}

/// Decodes one block from the front of `bytes`; `consumed` receives the block length.
inline Block decode(std::string_view bytes, std::size_t* consumed = nullptr) {
  if (bytes.size() < kHeaderSize || std::memcmp(bytes.data(), kMagic.data(), 4) != 0)
    fail(ErrorKind::format, "missing PSFM magic header");
  const auto* p = reinterpret_cast<const unsigned char*>(bytes.data());
  if (p[4] != kVersion)
    fail(ErrorKind::format, "unsupported PSFM version " + std::to_string(p[4]));
  Block block;
  block.grid_h = detail::get_u32(p + 5);
  block.grid_w = detail::get_u32(p + 9);
  block.dim = detail::get_u32(p + 13);
  const std::size_t n = block.expected_size();
  if (bytes.size() - kHeaderSize < 4 * n)
    fail(ErrorKind::corruption, "PSFM payload truncated: header declares " + std::to_string(n) +
                                    " values, found " +
                                    std::to_string((bytes.size() - kHeaderSize) / 4));
  block.values.resize(n);
  for (std::size_t i = 0; i < n; ++i)
    block.values[i] = std::bit_cast<float>(detail::get_u32(p + kHeaderSize + 4 * i));
  if (consumed != nullptr) *consumed = kHeaderSize + 4 * n;
  return block;
}

inline std::string read_file_bytes(const std::filesystem::path& path) {
  std::ifstream in(path, std::ios::binary);
  if (!in) fail(ErrorKind::io, "cannot open " + path.string());
  return {std::istreambuf_iterator<char>(in), std::istreambuf_iterator<char>()};
}

inline void write_file_bytes(const std::filesystem::path& path, std::string_view bytes) {
  if (path.has_parent_path()) std::filesystem::create_directories(path.parent_path());
  std::ofstream out(path, std::ios::binary | std::ios::trunc);
  if (!out) fail(ErrorKind::io, "cannot write " + path.string());
  out.write(bytes.data(), static_cast<std::streamsize>(bytes.size()));
  if (!out) fail(ErrorKind::io, "short write to " + path.string());
}

/// Whole-file read; trailing bytes beyond the declared payload count as corruption.
inline Block read_file(const std::filesystem::path& path) {
  const std::string bytes = read_file_bytes(path);
  std::size_t used = 0;
  Block block = decode(bytes, &used);
  if (used != bytes.size())
    fail(ErrorKind::corruption, path.string() + ": trailing bytes after PSFM payload");
  return block;
}

inline void write_file(const std::filesystem::path& path, const Block& block) {
  write_file_bytes(path, encode(block));
}

inline Block from_doubles(std::uint32_t h, std::uint32_t w, std::uint32_t dim,
                          std::span<const double> values) {
  Block b{h, w, dim, {}};
  b.values.assign(values.begin(), values.end());
  require(b.values.size() == b.expected_size(), ErrorKind::validation,
          "PSFM block value count does not match its shape");
  return b;
}

inline std::vector<double> to_doubles(const Block& b) {
  return {b.values.begin(), b.values.end()};
}

}  // namespace partsmith::psfm
