#pragma once

#include <iosfwd>
#include <string>
#include <vector>

namespace carkit {

enum ExitCode : int {
  kExitOk = 0,
  kExitConfig = 1,
  kExitBackend = 2,
  kExitData = 3,
};

/// Runs one CLI invocation. `args` excludes the program name.
/// Reports go to `out`; progress and the single error line go to `err`.
int run_cli(const std::vector<std::string>& args, std::ostream& out, std::ostream& err);

}  // namespace carkit
