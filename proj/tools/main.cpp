#include <iostream>

#include "lfuse/cli.hpp"

int main(int argc, char** argv) { return lfuse::run_cli(argc, argv, std::cout, std::cerr); }
