#include "seqhand/cli.hpp"

int main(int argc, char** argv) {
  return seqhand::cli::run(std::vector<std::string>(argv + 1, argv + argc));
}
