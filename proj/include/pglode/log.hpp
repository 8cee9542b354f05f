#pragma once

#include <functional>
#include <iostream>
#include <string>
#include <utility>

namespace pglode::log {

using Sink = std::function<void(const std::string&)>;

inline Sink& warning_sink() {
  static Sink sink = [](const std::string& msg) { std::clog << "warning: " << msg << '\n'; };
  return sink;
}

/// Replace the warning sink; returns the previous one.
inline Sink set_warning_sink(Sink sink) { return std::exchange(warning_sink(), std::move(sink)); }

inline void warn(const std::string& msg) {
  if (warning_sink()) warning_sink()(msg);
}

}  // namespace pglode::log
