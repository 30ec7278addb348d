#include <iostream>

#include "vql/cli/commands.hpp"

int main(int argc, char** argv) {
  return vql::cli::run(std::vector<std::string>(argv + 1, argv + argc), std::cout, std::cerr);
}
