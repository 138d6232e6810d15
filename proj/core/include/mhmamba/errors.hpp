#pragma once

#include <stdexcept>
#include <string>

namespace mhm {

/// Base of every error thrown by the library.
class Error : public std::runtime_error {
public:
    using std::runtime_error::runtime_error;
};

/// Operand shapes are incompatible; the message names the offending axis.
class ShapeError : public Error {
public:
    using Error::Error;
};

/// A configuration violates a construction-time invariant.
class ConfigError : public Error {
public:
    using Error::Error;
};

/// A non-finite value appeared where a finite one is required.
class NumericError : public Error {
public:
    using Error::Error;
};

class IoError : public Error {
public:
    enum class Code {
        Open,
        Header,
        UnknownDtype,
        TruncatedPayload,
        SizeMismatch,
    };

    IoError(Code code, const std::string& what) : Error(what), code_(code) {}

    Code code() const noexcept { return code_; }

private:
    Code code_;
};

}  // namespace mhm
