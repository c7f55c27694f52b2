#pragma once

#include <stdexcept>
#include <string>

namespace facet {

// Base class for all engine errors.
class Error : public std::runtime_error {
public:
    using std::runtime_error::runtime_error;
};

// A caller violated a documented precondition (shape mismatch, bad axis, ...).
class ContractError : public Error {
public:
    using Error::Error;
};

// Numerically valid call hit an invalid domain (log of zero, degenerate pose, ...).
class DomainError : public Error {
public:
    using Error::Error;
};

// File or stream failure; message carries the path.
class IoError : public Error {
public:
    using Error::Error;
};

// Malformed or inconsistent run configuration.
class ConfigError : public Error {
public:
    using Error::Error;
};

inline void check(bool cond, const std::string& msg) {
    if (!cond) throw ContractError(msg);
}

} // namespace facet
