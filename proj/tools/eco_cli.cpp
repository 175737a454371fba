#include <iostream>
#include <string>
#include <vector>

#include "eco/cli.hpp"

int main(int argc, char** argv) {
  std::vector<std::string> args(argv, argv + argc);
  return eco::run_cli(args, std::cout, std::cerr);
}
