#pragma once

#include <stdexcept>
#include <string>

namespace miro {

/// Root of every exception thrown by the library.
class Error : public std::runtime_error {
public:
    using std::runtime_error::runtime_error;
};

/// Caller supplied an argument outside its documented domain.
/// The CLI maps this family to exit code 2.
class ValidationError : public Error {
public:
    using Error::Error;
};

class ShapeError : public ValidationError {
public:
    using ValidationError::ValidationError;
};

class NonFiniteError : public Error {
public:
    using Error::Error;
};

/// Misuse of an autodiff graph (non-scalar root, graph already consumed).
class GraphError : public Error {
public:
    using Error::Error;
};

/// Malformed or inconsistent file contents.
class FormatError : public Error {
public:
    using Error::Error;
};

class IoError : public Error {
public:
    using Error::Error;
};

}  // namespace miro
