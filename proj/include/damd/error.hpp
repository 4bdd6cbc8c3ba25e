#pragma once

#include <stdexcept>
#include <string>

namespace damd {

/// Base class for every error raised by the library.
class Error : public std::runtime_error {
public:
    using std::runtime_error::runtime_error;
};

/// Tensor or vector dimensions do not line up.
class DimensionError : public Error {
public:
    using Error::Error;
};

/// A caller broke an operation's precondition (non-scalar loss, bad flag value, ...).
class ContractError : public Error {
public:
    using Error::Error;
};

/// Inconsistent configuration (group count does not divide channels, unknown variant, ...).
class ConfigError : public Error {
public:
    using Error::Error;
};

/// Malformed or inconsistent input data (files, annotations, poses).
class DataError : public Error {
public:
    using Error::Error;
};

/// NaN/Inf showed up where it must not.
class NumericError : public Error {
public:
    using Error::Error;
};

} // namespace damd
