#pragma once

#include <stdexcept>
#include <string>

namespace tracenas {

// Contract violation: shapes or arguments do not match an operation's signature.
struct ShapeError : std::runtime_error {
    explicit ShapeError(const std::string& msg) : std::runtime_error(msg) {}
};

// A computation produced NaN/Inf or otherwise left the numeric domain.
struct NumericError : std::runtime_error {
    explicit NumericError(const std::string& msg) : std::runtime_error(msg) {}
};

// API misuse: bad flags, missing files, out-of-range configuration.
struct UsageError : std::runtime_error {
    explicit UsageError(const std::string& msg) : std::runtime_error(msg) {}
};

}  // namespace tracenas
