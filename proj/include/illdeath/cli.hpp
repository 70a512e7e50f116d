#pragma once

#include <ostream>
#include <string>
#include <vector>

namespace illdeath {

enum ExitCode : int { kExitOk = 0, kExitInput = 2, kExitConvergence = 3, kExitInternal = 4 };

/// Runs the command line `args` (without the program name) with subcommands
/// prep, fit, loo and simulate. Returns the process exit code.
int run_cli(const std::vector<std::string>& args, std::ostream& out, std::ostream& err);

}  // namespace illdeath
