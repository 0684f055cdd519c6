// Copyright (C) 2026 The partsmith Authors
// SPDX-License-Identifier: Apache-2.0

#pragma once

#include <openssl/evp.h>

#include <array>
#include <filesystem>
#include <string>
#include <string_view>

#include "partsmith/error.hpp"
#include "partsmith/psfm.hpp"

namespace partsmith {

inline std::string sha256_hex(std::string_view bytes) {
  std::array<unsigned char, EVP_MAX_MD_SIZE> md{};
  unsigned int len = 0;
  if (EVP_Digest(bytes.data(), bytes.size(), md.data(), &len, EVP_sha256(), nullptr) != 1)
    fail(ErrorKind::io, "sha256 digest failed");
  static constexpr char kHex[] = "0123456789abcdef";
  std::string out;
  out.reserve(2 * len);
  for (unsigned int i = 0; i < len; ++i) {
    out.push_back(kHex[md[i] >> 4]);
    out.push_back(kHex[md[i] & 0xF]);
  }
  return out;
}

inline std::string file_sha256(const std::filesystem::path& path) {
  return sha256_hex(psfm::read_file_bytes(path));
}

}  // namespace partsmith
