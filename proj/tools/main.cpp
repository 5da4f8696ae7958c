#include <iostream>
#include <string>
#include <vector>

#include "mmcr/cli.hpp"

int main(int argc, char** argv) {
  std::vector<std::string> args(argv + 1, argv + argc);
  return mmcr::dispatch(args, std::cout, std::cerr);
}
