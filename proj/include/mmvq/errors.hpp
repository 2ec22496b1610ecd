#pragma once

#include <stdexcept>
#include <string>

namespace mmvq {

// Bad shapes, bad config, bad files. CLI exit code 1.
struct ValidationError : std::runtime_error {
    explicit ValidationError(const std::string& msg) : std::runtime_error(msg) {}
};

// NaN/Inf values, degenerate metrics. CLI exit code 2.
struct NumericError : std::runtime_error {
    explicit NumericError(const std::string& msg) : std::runtime_error(msg) {}
};

}  // namespace mmvq
