#pragma once

#include <string>
#include <vector>

namespace strata {

// Runs one CLI invocation. Exit codes: 0 success/pass, 1 failed check or
// runtime error, 2 usage error.
int run_command(const std::vector<std::string>& args);

}  // namespace strata
