#include <string>
#include <vector>

#include "voxstreams/cli.hpp"

int main(int argc, char** argv) {
  std::vector<std::string> args(argv + 1, argv + argc);
  return voxstreams::cli::run_cli(args);
}
