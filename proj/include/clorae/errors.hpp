// SPDX-License-Identifier: Apache-2.0
#pragma once

#include <stdexcept>
#include <string>
#include <string_view>

namespace clorae {

enum class ErrorCategory {
    contract,   // API misuse (e.g. backward on a non-scalar)
    dimension,  // shape mismatch
    config,     // invalid configuration or hyperparameters
    data,       // dataset / schema problems
    manifest,   // checkpoint incompatibility
    numeric,    // NaN / Inf during training
    io,
};

class Error : public std::runtime_error {
public:
    Error(ErrorCategory category, const std::string& message)
        : std::runtime_error(message), category_(category) {}

    [[nodiscard]] ErrorCategory category() const noexcept { return category_; }

private:
    ErrorCategory category_;
};

[[nodiscard]] constexpr std::string_view category_name(ErrorCategory c) noexcept {
    switch (c) {
    case ErrorCategory::contract: return "contract";
    case ErrorCategory::dimension: return "dimension";
    case ErrorCategory::config: return "config";
    case ErrorCategory::data: return "data";
    case ErrorCategory::manifest: return "manifest";
    case ErrorCategory::numeric: return "numeric";
    case ErrorCategory::io: return "io";
    }
    return "unknown";
}

// Process exit code for a failure category; 0 is reserved for success and 1
// for unexpected exceptions.
[[nodiscard]] constexpr int exit_code(ErrorCategory c) noexcept {
    switch (c) {
    case ErrorCategory::contract: return 2;
    case ErrorCategory::config: return 3;
    case ErrorCategory::data: return 4;
    case ErrorCategory::manifest: return 5;
    case ErrorCategory::numeric: return 6;
    case ErrorCategory::dimension: return 7;
    case ErrorCategory::io: return 8;
    }
    return 1;
}

[[noreturn]] inline void fail(ErrorCategory c, const std::string& message) {
    throw Error(c, message);
}

inline void require(bool condition, ErrorCategory c, const std::string& message) {
    if (!condition) {
        throw Error(c, message);
    }
}

}  // namespace clorae
