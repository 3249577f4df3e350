#include <iostream>

#include "cmdret/cli.hpp"

int main(int argc, char** argv) { return cmdret::cli::run(argc, argv, std::cout, std::cerr); }
