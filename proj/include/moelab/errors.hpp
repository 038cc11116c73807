#pragma once

#include <stdexcept>
#include <string>

namespace moelab {

// Error taxonomy used across the library. The CLI maps these onto exit codes:
// validation/shape problems -> 2, training aborts -> 3, file problems -> 4.

struct DimensionError : std::runtime_error {
    explicit DimensionError(const std::string& msg) : std::runtime_error(msg) {}
};

struct ParameterError : std::runtime_error {
    explicit ParameterError(const std::string& msg) : std::runtime_error(msg) {}
};

struct IndexError : std::runtime_error {
    explicit IndexError(const std::string& msg) : std::runtime_error(msg) {}
};

struct ConsistencyError : std::runtime_error {
    explicit ConsistencyError(const std::string& msg) : std::runtime_error(msg) {}
};

struct IoError : std::runtime_error {
    explicit IoError(const std::string& msg) : std::runtime_error(msg) {}
};

// Thrown when a training run hits a non-finite loss; carries the diagnostic
// already written to the run directory.
struct TrainingAborted : std::runtime_error {
    explicit TrainingAborted(const std::string& msg) : std::runtime_error(msg) {}
};

}  // namespace moelab
