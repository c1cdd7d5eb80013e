#include "rdat/log.hpp"

#include <atomic>
#include <iostream>

namespace rdat::log {

namespace {
std::atomic<Level> g_level{Level::Warn};
}

void set_level(Level level) { g_level.store(level); }
Level level() { return g_level.load(); }

void warn(const std::string& message) {
  if (g_level.load() >= Level::Warn) std::cerr << "warning: " << message << '\n';
}

void info(const std::string& message) {
  if (g_level.load() >= Level::Info) std::cerr << message << '\n';
}

}  // namespace rdat::log
