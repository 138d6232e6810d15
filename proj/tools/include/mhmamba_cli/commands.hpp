#pragma once

#include <iosfwd>
#include <string>
#include <vector>

namespace mhm::cli {

/// Exit statuses of the `mhmamba` tool.
enum ExitCode : int {
    kExitOk = 0,
    kExitFailure = 1,  ///< numeric failure or a check that did not pass
    kExitUsage = 2,    ///< bad command line, configuration or input path
};

/// Parses `args` (without the program name) and runs the selected subcommand.
/// Tables go to `out`, diagnostics to `err`.
int run(const std::vector<std::string>& args, std::ostream& out, std::ostream& err);

/// Version tag recorded in manifests (git describe at configure time).
const char* version();

}  // namespace mhm::cli
