// Copyright (C) 2026 The partsmith Authors
// SPDX-License-Identifier: Apache-2.0

#include "partsmith/cli.hpp"

int main(int argc, char** argv) {
  std::vector<std::string> args(argv + 1, argv + argc);
  return partsmith::cli::run_cli(args);
}
