#pragma once

#include <string>
#include <vector>

namespace risclip {

// Subcommands: gen-data, train, eval, predict, visualize, inspect.
// Returns 0 on success, 1 on validation errors, 2 on runtime failures.
int run_cli(const std::vector<std::string>& args);
int run_cli(int argc, char** argv);

}  // namespace risclip
