#pragma once

namespace cellattn {

// Full command-line entry point: gen, train, cv, eval, explain, aggregate,
// stats. Returns the process exit code: 0 success, 2 config/usage error,
// 3 I/O error, 4 numerical failure.
int run_cli(int argc, const char* const* argv);

}  // namespace cellattn
