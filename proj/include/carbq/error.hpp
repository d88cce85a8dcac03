#pragma once

#include <cstddef>
#include <stdexcept>
#include <string>

namespace carbq {

/// Base of every error raised by the toolkit.
class Error : public std::runtime_error {
public:
    using std::runtime_error::runtime_error;
};

/// Malformed bytes in an on-disk format; carries the byte offset of the fault.
class FormatError : public Error {
public:
    FormatError(const std::string& what, std::size_t offset)
        : Error(what + " (at byte " + std::to_string(offset) + ")"), offset_(offset) {}

    /// Same fault, with a context prefix (e.g. the file name).
    FormatError(const std::string& context, const FormatError& inner)
        : Error(context + ": " + inner.what()), offset_(inner.offset_) {}

    std::size_t offset() const noexcept { return offset_; }

private:
    std::size_t offset_;
};

/// A caller violated a documented precondition.
class InvalidArgument : public Error {
public:
    using Error::Error;
};

/// An id or key that does not exist.
class NotFound : public Error {
public:
    using Error::Error;
};

class IoError : public Error {
public:
    using Error::Error;
};

/// Invalid configuration or missing required input (CLI exit code 3).
class ConfigError : public Error {
public:
    using Error::Error;
};

/// Training produced a non-finite loss or gradient.
class DivergenceError : public Error {
public:
    using Error::Error;
};

/// Optimistic-concurrency version check failed.
class ConflictError : public Error {
public:
    using Error::Error;
};

} // namespace carbq
