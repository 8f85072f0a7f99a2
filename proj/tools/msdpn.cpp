#include "msdpn/cli.hpp"

#include <iostream>

int main(int argc, char** argv) { return msdpn::cli::run(argc, argv, std::cout, std::cerr); }
