#pragma once

#include <cstddef>
#include <stdexcept>
#include <string>

namespace ske2grid {

// Error taxonomy shared across the library. The CLI maps ConfigError to
// exit code 2 and everything else to exit code 1.
struct Error : std::runtime_error {
    using std::runtime_error::runtime_error;
};

// Tensor shape disagreements.
struct DimensionError : Error {
    using Error::Error;
};

// Invalid configuration values (bad kernel size, unknown names, bad schedules).
struct ConfigError : Error {
    using Error::Error;
};

// Invalid data content (labels out of range, NaN coordinates).
struct DataError : Error {
    using Error::Error;
};

// On-disk format violations; carries the byte offset where parsing failed.
struct FormatError : Error {
    std::size_t offset;
    FormatError(const std::string& msg, std::size_t byte_offset)
        : Error(msg + " (at byte offset " + std::to_string(byte_offset) + ")"),
          offset(byte_offset) {}
};

// Checkpoint load problems: missing tensors, shape conflicts, version mismatch.
struct CheckpointError : Error {
    using Error::Error;
};

// Runtime training failures (divergence, non-finite gradients).
struct TrainingError : Error {
    using Error::Error;
};

}  // namespace ske2grid
