#include <iostream>

#include "mhmamba_cli/commands.hpp"

int main(int argc, char** argv) {
    return mhm::cli::run(std::vector<std::string>(argv + 1, argv + argc), std::cout, std::cerr);
}
