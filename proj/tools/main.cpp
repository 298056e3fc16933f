#include <vector>

#include "difftab/cli.hpp"

int main(int argc, char** argv) {
  return difftab::run_cli(std::vector<std::string>(argv + 1, argv + argc));
}
