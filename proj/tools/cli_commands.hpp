#pragma once

namespace streamconv_cli {

// Full command-line entry point; returns the process exit code.
// 0 success, 2 malformed request (parse/shape/usage), 3 equivalence check
// failed, 4 input/output or resource failure.
int run_cli(int argc, const char* const* argv);

}  // namespace streamconv_cli
