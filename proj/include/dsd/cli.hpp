#pragma once

#include <iosfwd>
#include <string>
#include <vector>

namespace dsd::cli {

inline constexpr int kExitOk = 0;
inline constexpr int kExitUsage = 2;     // bad flags, unreadable config or data
inline constexpr int kExitDiverged = 3;  // NaN loss during training

// Output directories default to $DSD_OUT_ROOT/<command> (or ./runs/<command>).
inline constexpr const char* kOutRootEnv = "DSD_OUT_ROOT";

// Runs one command line (without the program name) and returns the exit code.
int run(const std::vector<std::string>& args, std::ostream& out, std::ostream& err);

}  // namespace dsd::cli
