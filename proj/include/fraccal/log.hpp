#pragma once

#include <functional>
#include <iostream>
#include <string>

namespace fraccal {

/// Sink for non-fatal warnings; replace to capture or silence them.
inline std::function<void(const std::string&)>& warning_sink() {
    static std::function<void(const std::string&)> sink = [](const std::string& msg) {
        std::cerr << "warning: " << msg << '\n';
    };
    return sink;
}

inline void warn(const std::string& msg) {
    if (auto& sink = warning_sink()) {
        sink(msg);
    }
}

}  // namespace fraccal
