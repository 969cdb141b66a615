// SPDX-License-Identifier: Apache-2.0

#pragma once

#include <stdexcept>
#include <string>

namespace hilora {

/// Base for every error raised by the library.
class Error : public std::runtime_error {
public:
    using std::runtime_error::runtime_error;
};

/// Inconsistent dimensions, out-of-range indices or invalid config fields.
class ConfigError : public Error {
public:
    using Error::Error;
};

/// Input violates a documented precondition (e.g. non-orthonormal basis).
class PreconditionError : public Error {
public:
    using Error::Error;
};

/// Input is numerically degenerate where normalization is mandatory.
class DegenerateInputError : public Error {
public:
    using Error::Error;
};

/// Synthetic data generation could not satisfy its constraints.
class GenerationError : public Error {
public:
    using Error::Error;
};

/// Wraps a failure raised inside a protocol stage.
class StageError : public Error {
public:
    StageError(const std::string& stage, const std::string& what)
        : Error(stage + " stage: " + what), stage_(stage) {}
    const std::string& stage() const noexcept { return stage_; }

private:
    std::string stage_;
};

}  // namespace hilora
