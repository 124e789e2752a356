#include <iostream>

#include "fednl/cli.h"

int main(int argc, char** argv) { return fednl::cli_main(argc, argv, std::cout, std::cerr); }
