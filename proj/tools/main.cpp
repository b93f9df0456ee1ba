#include "msl/cli/cli.hpp"

#include <iostream>

int main(int argc, char** argv) { return msl::cli::run(argc, argv, std::cout, std::cerr); }
