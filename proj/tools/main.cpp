#include <malloc.h>

#include <iostream>
#include <string>
#include <vector>

#include "cli.hpp"

int main(int argc, char** argv) {
  // Keep freed tape buffers in the heap instead of returning them to the
  // kernel after every batch.
  mallopt(M_MMAP_THRESHOLD, 1 << 30);
  mallopt(M_TRIM_THRESHOLD, 1 << 30);
  return stampnet::cli::run(std::vector<std::string>(argv + 1, argv + argc), std::cout, std::cerr);
}
