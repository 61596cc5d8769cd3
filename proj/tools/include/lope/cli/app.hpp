#pragma once

#include <ostream>
#include <string>
#include <vector>

namespace lope::cli {

enum ExitCode : int {
  kExitOk = 0,
  kExitUsage = 1,
  kExitValidation = 2,
  kExitCheckFailed = 3,
};

/// Runs the `lope` command line; args exclude the program name.
int run_cli(const std::vector<std::string>& args, std::ostream& out, std::ostream& err);

}  // namespace lope::cli
