#pragma once

#include <stdexcept>
#include <string>

namespace loopmem {

/// Base of every error the library throws.
class Error : public std::runtime_error {
public:
    using std::runtime_error::runtime_error;
};

class ShapeError : public Error {
public:
    using Error::Error;
};

class IndexError : public Error {
public:
    using Error::Error;
};

/// Misuse of a stateful object, e.g. calling backward twice on one graph.
class StateError : public Error {
public:
    using Error::Error;
};

/// Invalid configuration. `field()` holds the dotted path of the offending field when known.
class ConfigError : public Error {
public:
    explicit ConfigError(const std::string& message, std::string field = {})
        : Error(field.empty() ? message : field + ": " + message), field_(std::move(field)) {}

    const std::string& field() const noexcept { return field_; }

private:
    std::string field_;
};

class CorruptCheckpoint : public Error {
public:
    using Error::Error;
};

/// Non-finite values where finite ones are required (NaN gradients and the like).
class NumericError : public Error {
public:
    using Error::Error;
};

class IoError : public Error {
public:
    using Error::Error;
};

}  // namespace loopmem
