#pragma once

#include <stdexcept>
#include <string>

namespace gefs {

/// Base class of every error thrown by the library. Messages are one line.
class Error : public std::runtime_error {
public:
    using std::runtime_error::runtime_error;
};

/// Malformed or inconsistent input data (CSV, sidecar, feature vectors).
class DataError : public Error {
public:
    using Error::Error;
};

/// A model that cannot be built or queried as requested.
class ModelError : public Error {
public:
    using Error::Error;
};

}  // namespace gefs
