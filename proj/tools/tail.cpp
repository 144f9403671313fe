#include <iostream>

#include "tail/cli.hpp"

int main(int argc, char** argv) {
  return tail::cli::run(std::vector<std::string>(argv + 1, argv + argc), std::cout, std::cerr);
}
