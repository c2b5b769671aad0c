#include <iostream>
#include <string>
#include <vector>

#include "loopmem/cli.hpp"

int main(int argc, char** argv) {
    std::vector<std::string> args(argv + 1, argv + argc);
    return loopmem::cli::run(std::move(args), std::cout, std::cerr);
}
