#pragma once

#include <stdexcept>
#include <string>

namespace sparse_rcnn {

class Error : public std::runtime_error {
public:
    using std::runtime_error::runtime_error;
};

// Incompatible tensor shapes.
class DimensionError : public Error {
public:
    using Error::Error;
};

// Violated precondition on an otherwise well-formed call.
class ContractError : public Error {
public:
    using Error::Error;
};

class ConfigError : public Error {
public:
    using Error::Error;
};

// Malformed on-disk data (bad magic, version, checksum).
class FormatError : public Error {
public:
    using Error::Error;
};

class IoError : public Error {
public:
    using Error::Error;
};

// Non-finite values during training.
class NumericError : public Error {
public:
    using Error::Error;
};

}  // namespace sparse_rcnn
