#pragma once

#include <stdexcept>
#include <string>

namespace lanedet {

// Shapes disagree with an operation's contract.
struct DimensionError : std::runtime_error {
    using std::runtime_error::runtime_error;
};

// Invalid configuration value (extents, ranges, thresholds, unknown variant).
struct ConfigError : std::runtime_error {
    using std::runtime_error::runtime_error;
};

// Degenerate camera/projection input (singular matrix, empty projection).
struct GeometryError : std::runtime_error {
    using std::runtime_error::runtime_error;
};

// Caller broke a documented precondition.
struct ContractError : std::runtime_error {
    using std::runtime_error::runtime_error;
};

// An operation produced NaN/Inf; results are never silently propagated.
struct NumericError : std::runtime_error {
    using std::runtime_error::runtime_error;
};

// Malformed serialized input; message names the offending field.
struct ParseError : std::runtime_error {
    using std::runtime_error::runtime_error;
};

struct IoError : std::runtime_error {
    using std::runtime_error::runtime_error;
};

}  // namespace lanedet
