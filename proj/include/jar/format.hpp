#pragma once

#include <charconv>
#include <string>

namespace jar {

// Shortest round-trip decimal form, locale independent.
inline std::string format_double(double v) {
    char buf[32];
    const auto res = std::to_chars(buf, buf + sizeof buf, v);
    return {buf, res.ptr};
}

}  // namespace jar
