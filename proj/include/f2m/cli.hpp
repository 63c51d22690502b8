#pragma once

// Command-line front end. `run_cli` is the whole program minus process
// setup, so tests can drive it in-process.

#include <iosfwd>
#include <string>
#include <vector>

namespace f2m {

inline constexpr const char* kToolVersion = "0.1.0";

/// args excludes the program name. Returns the process exit status:
/// 0 on success, 1 on a reported error, 2 on a usage error.
int run_cli(const std::vector<std::string>& args, std::ostream& out, std::ostream& err);

}  // namespace f2m
