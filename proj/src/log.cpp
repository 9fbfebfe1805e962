#include "mematch/log.hpp"

#include <cstdio>
#include <cstdlib>
#include <cstring>
#include <mutex>

namespace mematch::log {

namespace {

Level g_threshold = [] {
  const char* env = std::getenv("MEMATCH_LOG");
  if (env == nullptr) return Level::info;
  if (std::strcmp(env, "debug") == 0) return Level::debug;
  if (std::strcmp(env, "warn") == 0) return Level::warn;
  return Level::info;
}();

std::mutex g_mutex;

const char* level_tag(Level level) {
  switch (level) {
    case Level::debug: return "debug";
    case Level::info: return "info";
    case Level::warn: return "warn";
  }
  return "?";
}

}  // namespace

Level threshold() { return g_threshold; }

void set_threshold(Level level) { g_threshold = level; }

void write(Level level, const std::string& message) {
  if (static_cast<int>(level) < static_cast<int>(g_threshold)) return;
  std::lock_guard<std::mutex> lock(g_mutex);
  std::fprintf(stderr, "[%s] %s\n", level_tag(level), message.c_str());
}

}  // namespace mematch::log
