#pragma once

#include <iosfwd>
#include <string>
#include <vector>

namespace spodnet {

// Exit codes of the experiment runner.
inline constexpr int kExitOk = 0;
inline constexpr int kExitUsage = 2;
inline constexpr int kExitIo = 3;
inline constexpr int kExitNumerical = 4;

/// Runs one command line (args exclude the program name) and returns the
/// exit code. Subcommands: gen-data, train, eval, baseline, diagnose.
int run_cli(const std::vector<std::string>& args, std::ostream& out, std::ostream& err);

}  // namespace spodnet
