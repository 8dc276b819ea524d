#pragma once

#include <iosfwd>

namespace dsmr {

enum ExitCode : int {
  kExitOk = 0,
  kExitFailure = 1,
  kExitConfig = 2,
  kExitData = 3,
  kExitNumeric = 4,
  kExitGradcheck = 5,
};

/// Entry point of the `dsmr` command-line tool. Never throws; every error is
/// reported on `err` and mapped to an exit code.
int run_cli(int argc, const char* const* argv, std::ostream& out, std::ostream& err);

}  // namespace dsmr
