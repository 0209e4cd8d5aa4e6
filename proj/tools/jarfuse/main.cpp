#include <iostream>

#include "jar/cli.hpp"

int main(int argc, char** argv) { return jar::cli::run(argc, argv, std::cout, std::cerr); }
