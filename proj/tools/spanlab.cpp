// SPDX-License-Identifier: Apache-2.0
#include <iostream>
#include <string>
#include <vector>

#include "spanlab/cli.hpp"

int main(int argc, char** argv) {
  return spanlab::cli::run(std::vector<std::string>(argv + 1, argv + argc), std::cout, std::cerr);
}
