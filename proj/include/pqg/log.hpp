#pragma once

#include <iostream>
#include <mutex>
#include <sstream>
#include <string>

namespace pqg::log {

enum class Level { debug = 0, info = 1, warn = 2, error = 3, off = 4 };

inline Level& threshold() {
  static Level level = Level::info;
  return level;
}

inline void set_level(Level l) { threshold() = l; }

inline void write(Level l, const std::string& msg) {
  if (l < threshold()) return;
  static std::mutex mu;
  static const char* names[] = {"debug", "info", "warn", "error"};
  std::lock_guard<std::mutex> lock(mu);
  std::cerr << "[" << names[static_cast<int>(l)] << "] " << msg << '\n';
}

template <typename... Args>
std::string concat(Args&&... args) {
  std::ostringstream os;
  (os << ... << std::forward<Args>(args));
  return os.str();
}

template <typename... Args>
void info(Args&&... args) {
  write(Level::info, concat(std::forward<Args>(args)...));
}
template <typename... Args>
void warn(Args&&... args) {
  write(Level::warn, concat(std::forward<Args>(args)...));
}
template <typename... Args>
void debug(Args&&... args) {
  write(Level::debug, concat(std::forward<Args>(args)...));
}

}  // namespace pqg::log
