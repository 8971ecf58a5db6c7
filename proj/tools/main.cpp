#include <string>
#include <vector>

#include "dualpath/cli.hpp"

int main(int argc, char** argv) {
    std::vector<std::string> args(argv + 1, argv + argc);
    return dualpath::cli::run_command(args);
}
