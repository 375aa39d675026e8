#include <vector>
#include <string>

#include "sdseg/cli.hpp"

int main(int argc, char** argv) {
    std::vector<std::string> args(argv + 1, argv + argc);
    return sdseg::cli::run(args);
}
