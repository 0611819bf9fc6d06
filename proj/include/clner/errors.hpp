#pragma once

#include <stdexcept>
#include <string>

namespace clner {

// Bad user input: flags, config files, unknown names.
struct ConfigError : std::runtime_error {
    using std::runtime_error::runtime_error;
};

// Unreadable or malformed data files, empty tasks.
struct DataError : std::runtime_error {
    using std::runtime_error::runtime_error;
};

// A training run that had to stop part way; carries the failing step.
struct RunAbort : std::runtime_error {
    RunAbort(std::size_t step, const std::string& what)
        : std::runtime_error("step " + std::to_string(step) + ": " + what), step(step) {}
    std::size_t step;
};

}  // namespace clner
