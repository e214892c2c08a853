#pragma once

#include <iosfwd>

namespace msnet::cli {

enum ExitCode { kOk = 0, kValidationError = 1, kRuntimeFailure = 2 };

/// Entry point of the msnet tool: gen-data, train, eval, verify.
int run(int argc, char** argv, std::ostream& out, std::ostream& err);

}  // namespace msnet::cli
