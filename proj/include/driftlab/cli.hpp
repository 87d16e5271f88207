#pragma once

// Command-line front end. Exit codes:
//   0 success, 1 I/O, 2 invalid configuration or arguments, 3 numeric failure,
//   4 pseudo-label refinement failure, 5 gradient-check failure.

#include "driftlab/error.hpp"

namespace driftlab {

int exit_code_for(ErrorKind kind);

int run_cli(int argc, const char* const* argv);

}  // namespace driftlab
