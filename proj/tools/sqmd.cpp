#include <iostream>

#include "sqmd/cli.hpp"

int main(int argc, char** argv) { return sqmd::cli_main(argc, argv, std::cout, std::cerr); }
