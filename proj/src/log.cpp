#include "fdn/log.hpp"

#include <iostream>
#include <mutex>
#include <utility>

namespace fdn::log {

namespace {

std::mutex g_mutex;
std::vector<std::string> g_warnings;
bool g_quiet = false;

}  // namespace

void info(const std::string& message)
{
    std::lock_guard lock(g_mutex);
    if (!g_quiet)
        std::cerr << "[fdn] " << message << '\n';
}

void warn(const std::string& message)
{
    std::lock_guard lock(g_mutex);
    g_warnings.push_back(message);
    if (!g_quiet)
        std::cerr << "[fdn] warning: " << message << '\n';
}

std::vector<std::string> take_warnings()
{
    std::lock_guard lock(g_mutex);
    return std::exchange(g_warnings, {});
}

void set_quiet(bool quiet)
{
    std::lock_guard lock(g_mutex);
    g_quiet = quiet;
}

}  // namespace fdn::log
