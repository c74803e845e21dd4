#include <iostream>

#include "multilid/cli.hpp"

int main(int argc, char** argv) { return multilid::run_cli(argc, argv, std::cout, std::cerr); }
