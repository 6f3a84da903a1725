#pragma once

// The `utaca` command line: datagen, train, run, eval, bench, selftest.

#include <iosfwd>

namespace utaca::cli {

enum ExitCode : int { kOk = 0, kUsage = 1, kInvariant = 2, kIo = 3 };

/// Parses argv and runs one command. Never throws; errors map to exit codes.
int run(int argc, const char* const* argv, std::ostream& out, std::ostream& err);

}  // namespace utaca::cli
