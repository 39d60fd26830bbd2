#include <iostream>

#include "dualsr/cli.hpp"

int main(int argc, char** argv) {
  std::vector<std::string> args(argv + 1, argv + argc);
  return dualsr::cli::run(args, std::cout, std::cerr);
}
