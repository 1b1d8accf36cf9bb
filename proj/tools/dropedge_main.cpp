#include "dropedge/cli.hpp"

#include <iostream>

int main(int argc, char** argv) { return dropedge::cli_main(argc, argv, std::cout, std::cerr); }
