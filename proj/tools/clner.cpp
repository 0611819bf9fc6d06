#include <iostream>
#include <string>
#include <vector>

#include "clner/cli.hpp"

int main(int argc, char** argv) {
    const std::vector<std::string> args(argv, argv + argc);
    return clner::cli::run(args, std::cout, std::cerr);
}
