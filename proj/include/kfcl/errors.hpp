#pragma once

#include <stdexcept>
#include <string>

namespace kfcl {

// Invalid model/strategy/plan wiring detected before any training work.
struct ConfigError : std::runtime_error {
    using std::runtime_error::runtime_error;
};

// Caller violated an operation precondition (empty batch, bad argument).
struct UsageError : std::runtime_error {
    using std::runtime_error::runtime_error;
};

// Non-finite values appeared during training.
struct DivergenceError : std::runtime_error {
    using std::runtime_error::runtime_error;
};

// A dense-oracle computation was requested above the configured size cap.
struct OracleScaleError : std::runtime_error {
    using std::runtime_error::runtime_error;
};

// A snapshot does not match the model it is applied to.
struct SnapshotMismatchError : std::runtime_error {
    using std::runtime_error::runtime_error;
};

// Malformed input file.
struct ParseError : std::runtime_error {
    using std::runtime_error::runtime_error;
};

// Filesystem failure, reported with the offending path.
struct IoError : std::runtime_error {
    using std::runtime_error::runtime_error;
};

} // namespace kfcl
