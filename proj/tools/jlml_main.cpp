#include <iostream>

#include "jlml/cli.hpp"

int main(int argc, char** argv) {
  return jlml::run_cli(std::vector<std::string>(argv + 1, argv + argc), std::cout, std::cerr);
}
