// SPDX-License-Identifier: Apache-2.0
#pragma once

#include <atomic>
#include <iostream>
#include <mutex>
#include <sstream>
#include <string>

namespace crossan {

enum class LogLevel { quiet = 0, info = 1, debug = 2 };

inline std::atomic<LogLevel>& log_level() {
    static std::atomic<LogLevel> level{LogLevel::info};
    return level;
}

template <typename... Args>
void log_at(LogLevel level, Args&&... args) {
    if (static_cast<int>(level) > static_cast<int>(log_level().load())) return;
    std::ostringstream ss;
    (ss << ... << std::forward<Args>(args));
    static std::mutex mu;
    std::lock_guard lock(mu);
    std::clog << "[crossan] " << ss.str() << '\n';
}

template <typename... Args>
void log_info(Args&&... args) {
    log_at(LogLevel::info, std::forward<Args>(args)...);
}

template <typename... Args>
void log_debug(Args&&... args) {
    log_at(LogLevel::debug, std::forward<Args>(args)...);
}

}  // namespace crossan
