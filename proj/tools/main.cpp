#include <iostream>

#include "dsmr/cli.hpp"

int main(int argc, char** argv) { return dsmr::run_cli(argc, argv, std::cout, std::cerr); }
