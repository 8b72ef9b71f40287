#pragma once

#include <string>
#include <vector>

namespace fdn::log {

void info(const std::string& message);

/// Prints to stderr and keeps a copy retrievable with take_warnings().
void warn(const std::string& message);

/// Returns and clears the warnings recorded since the last call.
std::vector<std::string> take_warnings();

void set_quiet(bool quiet);

}  // namespace fdn::log
