#include <iostream>
#include <string>
#include <vector>

#include "f2m/cli.hpp"

int main(int argc, char** argv) {
    return f2m::run_cli(std::vector<std::string>(argv + 1, argv + argc), std::cout, std::cerr);
}
