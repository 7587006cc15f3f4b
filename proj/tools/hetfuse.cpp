#include <iostream>

#include "hetfuse/cli.hpp"

int main(int argc, char** argv) { return hetfuse::cli::run(argc, argv, std::cout, std::cerr); }
