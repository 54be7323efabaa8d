#include <iostream>

#include "figver/cli.hpp"

int main(int argc, char **argv) { return figver::app::run_cli(argc, argv, std::cout, std::cerr); }
