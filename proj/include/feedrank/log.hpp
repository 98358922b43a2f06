#pragma once

// Process-wide warning channel. Library code reports recoverable anomalies
// (clamped grades, dangling ids, short candidate lists) here instead of
// failing; the sink defaults to stderr and can be swapped by tests or tools.

#include <functional>
#include <iostream>
#include <mutex>
#include <string>
#include <string_view>
#include <utility>
#include <vector>

namespace feedrank::log {

using Sink = std::function<void(std::string_view)>;

namespace detail {

struct State {
    std::mutex mutex;
    Sink sink = [](std::string_view msg) { std::cerr << "warning: " << msg << '\n'; };
};

inline State& state() {
    static State s;
    return s;
}

}  // namespace detail

/// Replaces the sink and returns the previous one.
inline Sink set_sink(Sink sink) {
    auto& s = detail::state();
    std::lock_guard lock(s.mutex);
    return std::exchange(s.sink, std::move(sink));
}

inline void warn(std::string_view msg) {
    auto& s = detail::state();
    std::lock_guard lock(s.mutex);
    if (s.sink) s.sink(msg);
}

/// Collects warnings for the lifetime of the guard, restoring the old sink after.
class ScopedCapture {
public:
    ScopedCapture()
        : previous_(set_sink([this](std::string_view m) { messages_.emplace_back(m); })) {}
    ~ScopedCapture() { set_sink(std::move(previous_)); }
    ScopedCapture(const ScopedCapture&) = delete;
    ScopedCapture& operator=(const ScopedCapture&) = delete;

    const std::vector<std::string>& messages() const { return messages_; }

private:
    std::vector<std::string> messages_;
    Sink previous_;
};

}  // namespace feedrank::log
