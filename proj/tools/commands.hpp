#pragma once

#include <iosfwd>

namespace bidiseq::cli {

inline constexpr int kExitOk = 0;
inline constexpr int kExitFailure = 1;
inline constexpr int kExitUsage = 2;

// Parses the command line, runs one subcommand and returns the exit code.
int run(int argc, char** argv, std::ostream& out, std::ostream& err);

}  // namespace bidiseq::cli
