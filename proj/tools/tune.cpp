// SPDX-FileCopyrightText: Copyright (c) 2026 The minitune Authors
// SPDX-License-Identifier: Apache-2.0

#include <iostream>

#include "cli.hpp"

int main(int argc, char** argv) {
  return minitune::cli::cli_main(std::vector<std::string>(argv + 1, argv + argc), std::cout, std::cerr);
}
