#pragma once

#include <string>
#include <vector>

namespace fdn::cli {

inline constexpr int kExitOk = 0;
inline constexpr int kExitUsage = 1;
inline constexpr int kExitRuntime = 2;

/// Runs one subcommand. args[0] is the program name.
int run(const std::vector<std::string>& args);
int run(int argc, char** argv);

}  // namespace fdn::cli
