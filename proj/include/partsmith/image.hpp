// Copyright (C) 2026 The partsmith Authors
// SPDX-License-Identifier: Apache-2.0

#pragma once

#include <zlib.h>

#include <algorithm>
#include <array>
#include <cmath>
#include <cstdint>
#include <filesystem>
#include <sstream>
#include <string>
#include <vector>

#include "partsmith/error.hpp"
#include "partsmith/psfm.hpp"

namespace partsmith {

/// Decoded RGB image, channel-interleaved, values in [0, 1].
struct RgbImage {
  std::size_t width = 0;
  std::size_t height = 0;
  std::vector<float> pixels;  // height * width * 3

  RgbImage() = default;
  RgbImage(std::size_t w, std::size_t h) : width(w), height(h), pixels(w * h * 3, 0.0f) {}

  float& at(std::size_t y, std::size_t x, std::size_t c) { return pixels[(y * width + x) * 3 + c]; }
  float at(std::size_t y, std::size_t x, std::size_t c) const {
    return pixels[(y * width + x) * 3 + c];
  }

  void fill_rect(std::size_t y0, std::size_t x0, std::size_t h, std::size_t w,
                 const std::array<float, 3>& rgb) {
    for (std::size_t y = y0; y < std::min(height, y0 + h); ++y)
      for (std::size_t x = x0; x < std::min(width, x0 + w); ++x)
        for (std::size_t c = 0; c < 3; ++c) at(y, x, c) = rgb[c];
  }

  bool operator==(const RgbImage&) const = default;
};

inline std::uint8_t to_byte(float v) {
  return static_cast<std::uint8_t>(std::lround(std::clamp(v, 0.0f, 1.0f) * 255.0f));
}

/// Binary PPM (P6) encoder; the codec adapter used by the CLI.
inline std::string encode_ppm(const RgbImage& img) {
  std::string out = "P6\n" + std::to_string(img.width) + " " + std::to_string(img.height) + "\n255\n";
  out.reserve(out.size() + img.pixels.size());
  for (float v : img.pixels) out.push_back(static_cast<char>(to_byte(v)));
  return out;
}

inline RgbImage decode_ppm(const std::string& bytes) {
  std::istringstream in(bytes);
  std::string magic;
  std::size_t w = 0, h = 0, maxval = 0;
  in >> magic;
  if (magic != "P6") fail(ErrorKind::format, "not a binary PPM image");
  auto skip_comments = [&] {
    in >> std::ws;
    while (in.peek() == '#') {
      std::string line;
      std::getline(in, line);
      in >> std::ws;
    }
  };
  skip_comments();
  in >> w;
  skip_comments();
  in >> h;
  skip_comments();
  in >> maxval;
  if (!in || w == 0 || h == 0 || maxval != 255) fail(ErrorKind::format, "unsupported PPM header");
  in.get();
  RgbImage img(w, h);
  const auto offset = static_cast<std::size_t>(in.tellg());
  if (bytes.size() < offset + img.pixels.size()) fail(ErrorKind::corruption, "PPM payload truncated");
  for (std::size_t i = 0; i < img.pixels.size(); ++i)
    img.pixels[i] = static_cast<float>(static_cast<unsigned char>(bytes[offset + i])) / 255.0f;
  return img;
}

inline RgbImage read_ppm(const std::filesystem::path& path) {
  return decode_ppm(psfm::read_file_bytes(path));
}

namespace detail {

inline void png_chunk(std::string& out, const char* type, const std::string& payload) {
  auto put_be = [&](std::uint32_t v) {
    for (int i = 3; i >= 0; --i) out.push_back(static_cast<char>((v >> (8 * i)) & 0xFFu));
  };
  put_be(static_cast<std::uint32_t>(payload.size()));
  std::string body(type, 4);
  body += payload;
  out += body;
  put_be(static_cast<std::uint32_t>(
      crc32(0L, reinterpret_cast<const Bytef*>(body.data()), static_cast<uInt>(body.size()))));
}

}  // namespace detail

/// PNG encoder over 8-bit samples; `channels` is 1 (gray) or 3 (RGB).
inline std::string encode_png(std::size_t width, std::size_t height, std::size_t channels,
                              const std::vector<std::uint8_t>& samples) {
  require(channels == 1 || channels == 3, ErrorKind::validation, "PNG channels must be 1 or 3");
  require(samples.size() == width * height * channels, ErrorKind::validation,
          "PNG sample count does not match geometry");
  std::string raw;
  raw.reserve(height * (width * channels + 1));
  for (std::size_t y = 0; y < height; ++y) {
    raw.push_back('\0');
    raw.append(reinterpret_cast<const char*>(samples.data() + y * width * channels), width * channels);
  }
  uLongf packed_size = compressBound(static_cast<uLong>(raw.size()));
  std::string packed(packed_size, '\0');
  if (compress2(reinterpret_cast<Bytef*>(packed.data()), &packed_size,
                reinterpret_cast<const Bytef*>(raw.data()), static_cast<uLong>(raw.size()), 6) != Z_OK)
    fail(ErrorKind::io, "zlib compression failed");
  packed.resize(packed_size);

  std::string out("\x89PNG\r\n\x1a\n", 8);
  std::string ihdr;
  for (std::uint32_t v : {static_cast<std::uint32_t>(width), static_cast<std::uint32_t>(height)})
    for (int i = 3; i >= 0; --i) ihdr.push_back(static_cast<char>((v >> (8 * i)) & 0xFFu));
  ihdr.push_back(8);                                  // bit depth
  ihdr.push_back(channels == 3 ? 2 : 0);              // colour type
  ihdr.append(3, '\0');                               // compression, filter, interlace
  detail::png_chunk(out, "IHDR", ihdr);
  detail::png_chunk(out, "IDAT", packed);
  detail::png_chunk(out, "IEND", "");
  return out;
}

inline std::string encode_png(const RgbImage& img) {
  std::vector<std::uint8_t> samples(img.pixels.size());
  std::transform(img.pixels.begin(), img.pixels.end(), samples.begin(), to_byte);
  return encode_png(img.width, img.height, 3, samples);
}

}  // namespace partsmith
