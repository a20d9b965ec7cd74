#pragma once

#include <iosfwd>
#include <string>
#include <vector>

namespace dnet::cli {

enum ExitCode : int {
  kOk = 0,
  kUsage = 1,
  kDataError = 2,
  kNumericFailure = 3,
};

/// Runs one subcommand. `args` excludes the program name.
int cli_main(const std::vector<std::string>& args, std::ostream& out, std::ostream& err);

int cli_main(int argc, char** argv);

}  // namespace dnet::cli
