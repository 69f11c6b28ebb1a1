#include <string>
#include <vector>

#include "nowcast/cli.hpp"

int main(int argc, char** argv) {
  return nowcast::run_cli(std::vector<std::string>(argv + 1, argv + argc));
}
