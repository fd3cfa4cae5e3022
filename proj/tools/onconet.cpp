#include <iostream>

#include "onconet/cli.hpp"

int main(int argc, char** argv) { return onconet::run_cli(argc, argv, std::cout, std::cerr); }
