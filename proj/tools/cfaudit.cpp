#include <iostream>

#include "cfaudit/cli.hpp"

int main(int argc, char** argv) { return cfaudit::cli::run(argc, argv, std::cout, std::cerr); }
