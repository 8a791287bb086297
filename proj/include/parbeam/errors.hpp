#pragma once

#include <stdexcept>
#include <string>

namespace parbeam {

/// Malformed or inconsistent file content (bad header field, wrong magic).
struct FormatError : std::runtime_error {
    explicit FormatError(const std::string& msg) : std::runtime_error(msg) {}
};

/// Raw payload size disagrees with the declared shape.
struct SizeMismatchError : std::runtime_error {
    explicit SizeMismatchError(const std::string& msg) : std::runtime_error(msg) {}
};

/// Array shapes incompatible with the requested operation.
struct ShapeError : std::invalid_argument {
    explicit ShapeError(const std::string& msg) : std::invalid_argument(msg) {}
};

/// Value outside the mathematical domain of the operation (negative counts, ...).
struct DomainError : std::invalid_argument {
    explicit DomainError(const std::string& msg) : std::invalid_argument(msg) {}
};

/// Invalid configuration parameter (even kernel size, subsets not dividing views, ...).
struct ParamError : std::invalid_argument {
    explicit ParamError(const std::string& msg) : std::invalid_argument(msg) {}
};

struct IoError : std::runtime_error {
    explicit IoError(const std::string& msg) : std::runtime_error(msg) {}
};

/// Non-finite gradient or optimizer state; message names the parameter path.
struct TrainingError : std::runtime_error {
    explicit TrainingError(const std::string& msg) : std::runtime_error(msg) {}
};

/// API misuse (stale tape, consumed workspace).
struct UsageError : std::logic_error {
    explicit UsageError(const std::string& msg) : std::logic_error(msg) {}
};

} // namespace parbeam
