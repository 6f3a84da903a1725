#include <iostream>

#include "utaca/cli.hpp"

int main(int argc, char** argv) { return utaca::cli::run(argc, argv, std::cout, std::cerr); }
