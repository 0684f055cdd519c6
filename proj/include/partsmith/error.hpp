// Copyright (C) 2026 The partsmith Authors
// SPDX-License-Identifier: Apache-2.0

#pragma once

#include <stdexcept>
#include <string>

namespace partsmith {

enum class ErrorKind {
  validation,
  format,
  corruption,
  degenerate,
  capacity,
  unsupported,
  io,
  dependency,
  backend_unavailable,
  numerical,
  usage,
};

inline const char* to_string(ErrorKind kind) {
  switch (kind) {
    case ErrorKind::validation: return "validation";
    case ErrorKind::format: return "format";
    case ErrorKind::corruption: return "corruption";
    case ErrorKind::degenerate: return "degenerate-clustering";
    case ErrorKind::capacity: return "capacity";
    case ErrorKind::unsupported: return "unsupported";
    case ErrorKind::io: return "io";
    case ErrorKind::dependency: return "dependency";
    case ErrorKind::backend_unavailable: return "backend-unavailable";
    case ErrorKind::numerical: return "non-finite";
    case ErrorKind::usage: return "usage";
  }
  return "unknown";
}

class Error : public std::runtime_error {
 public:
  Error(ErrorKind kind, const std::string& what)
      : std::runtime_error(std::string(to_string(kind)) + " error: " + what), kind_(kind) {}

  ErrorKind kind() const noexcept { return kind_; }

  /// Process exit code: 2 for dependency/backend failures, 1 for everything else.
  int exit_code() const noexcept {
    return (kind_ == ErrorKind::dependency || kind_ == ErrorKind::backend_unavailable) ? 2 : 1;
  }

 private:
  ErrorKind kind_;
};

[[noreturn]] inline void fail(ErrorKind kind, const std::string& what) { throw Error(kind, what); }

inline void require(bool cond, ErrorKind kind, const std::string& what) {
  if (!cond) fail(kind, what);
}

}  // namespace partsmith
