#include <string>
#include <vector>

#include "sfg/commands.hpp"

extern char** environ;

int main(int argc, char** argv) {
    std::vector<std::string> env;
    for (char** e = environ; e && *e; ++e) env.emplace_back(*e);
    return sfg::run_cli(argc, argv, env);
}
