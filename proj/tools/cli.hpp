#pragma once

#include <iosfwd>
#include <string>
#include <vector>

namespace stampnet::cli {

inline constexpr int kExitOk = 0;
inline constexpr int kExitValidation = 2;
inline constexpr int kExitNumeric = 3;
inline constexpr int kExitCompatibility = 4;

/// Parses `args` (without the program name) and runs one subcommand:
/// gen, train, eval, stamps or reconstruct. Returns the process exit code.
int run(const std::vector<std::string>& args, std::ostream& out, std::ostream& err);

}  // namespace stampnet::cli
