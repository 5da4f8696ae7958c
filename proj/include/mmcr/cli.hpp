#pragma once

#include <iosfwd>
#include <string>
#include <vector>

namespace mmcr {

/// Exit codes of the command-line tool.
enum ExitCode : int { kExitOk = 0, kExitUsage = 1, kExitData = 2, kExitInternal = 3 };

/// Runs one command line (args excludes the program name). Results go to out
/// as one JSON summary line; diagnostics go to err.
int dispatch(const std::vector<std::string>& args, std::ostream& out, std::ostream& err);

}  // namespace mmcr
