#include <iostream>

#include "adp/cli.hpp"

int main(int argc, char** argv) { return adp::cli::run(argc, argv, std::cout, std::cerr); }
