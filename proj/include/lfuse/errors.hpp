#pragma once

#include <cstddef>
#include <stdexcept>
#include <string>

namespace lfuse {

class Error : public std::runtime_error {
public:
    using std::runtime_error::runtime_error;
};

class InvalidArgument : public Error {
public:
    using Error::Error;
};

// Bad configuration: missing metadata, unknown keys, contradictory flags.
class ConfigError : public Error {
public:
    using Error::Error;
};

class StructuralError : public Error {
public:
    using Error::Error;
};

class NumericalDomainError : public Error {
public:
    NumericalDomainError(const std::string& what, std::size_t index)
        : Error(what + " (sample index " + std::to_string(index) + ")"), index_(index) {}
    std::size_t index() const noexcept { return index_; }

private:
    std::size_t index_;
};

class CheckpointError : public Error {
public:
    using Error::Error;
};

class IncompatibleCheckpoint : public CheckpointError {
public:
    using CheckpointError::CheckpointError;
};

class TopologyMismatch : public CheckpointError {
public:
    using CheckpointError::CheckpointError;
};

}  // namespace lfuse
