#include <iostream>

#include "stagecap/cli.hpp"

int main(int argc, char** argv) {
  return stagecap::cli::dispatch(argc, argv, std::cout, std::cerr);
}
