#include <iostream>

#include "nanopro/cli.hpp"

int main(int argc, char** argv) { return nanopro::cli::dispatch(argc, argv, std::cout, std::cerr); }
