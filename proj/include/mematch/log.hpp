#pragma once

#include <string>

namespace mematch::log {

enum class Level { debug = 0, info = 1, warn = 2 };

// Threshold comes from MEMATCH_LOG (debug|info|warn), default info.
Level threshold();
void set_threshold(Level level);

void write(Level level, const std::string& message);

inline void debug(const std::string& message) { write(Level::debug, message); }
inline void info(const std::string& message) { write(Level::info, message); }
inline void warn(const std::string& message) { write(Level::warn, message); }

}  // namespace mematch::log
