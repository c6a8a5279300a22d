#pragma once

#include <stdexcept>
#include <string>

namespace oneshot {

/// Invalid parameters or inconsistent configuration. Maps to CLI exit code 2.
class ConfigError : public std::runtime_error {
public:
    using std::runtime_error::runtime_error;
};

/// Malformed or out-of-range input file content.
class FormatError : public std::runtime_error {
public:
    using std::runtime_error::runtime_error;
};

/// A pipeline stage could not produce its output. Maps to CLI exit code 3.
class StageError : public std::runtime_error {
public:
    StageError(std::string stage, const std::string& what)
        : std::runtime_error(stage + ": " + what), stage_(std::move(stage)) {}

    const std::string& stage() const noexcept { return stage_; }

private:
    std::string stage_;
};

}  // namespace oneshot
