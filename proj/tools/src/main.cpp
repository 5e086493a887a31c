#include <iostream>

#include "retiscreen/cli.hpp"

int main(int argc, char** argv) { return retiscreen::cli::run(argc, argv, std::cout, std::cerr); }
