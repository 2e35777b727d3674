#pragma once

#include <stdexcept>
#include <string>

namespace mutr {

// Base class for everything this library throws on purpose.
class Error : public std::runtime_error {
public:
    explicit Error(const std::string& msg) : std::runtime_error(msg) {}
};

// Invalid scalar argument (non-positive stride, bad axis, out-of-range epoch, ...).
class ArgumentError : public Error {
public:
    using Error::Error;
};

// Tensor shapes do not line up for the requested operation.
class DimensionError : public Error {
public:
    using Error::Error;
};

// Spatial dims not divisible by the unfold patch size.
class PatchSizeError : public DimensionError {
public:
    using DimensionError::DimensionError;
};

// Batch norm asked to compute statistics over a single element.
class DegenerateBatchError : public Error {
public:
    using Error::Error;
};

// Model config failed validation; message lists every violated constraint.
class ConfigError : public Error {
public:
    using Error::Error;
};

// Checkpoint file is structurally broken: bad magic, truncated blob, bad header.
class CheckpointFormatError : public Error {
public:
    using Error::Error;
};

// Checkpoint is well-formed but does not match the target model
// (config field mismatch, unknown/missing parameter, shape mismatch).
class CheckpointMismatchError : public Error {
public:
    using Error::Error;
};

// Filesystem / stream failures and malformed image files.
class IoError : public Error {
public:
    using Error::Error;
};

// Training aborted (NaN loss); message carries epoch/batch/lr diagnostics.
class TrainingDivergedError : public Error {
public:
    using Error::Error;
};

}  // namespace mutr
