#include <string>
#include <vector>

#include "satm/cli.hpp"

int main(int argc, char** argv) {
  std::vector<std::string> args(argv + 1, argv + argc);
  return satm::run_cli(args);
}
