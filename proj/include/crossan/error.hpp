// SPDX-License-Identifier: Apache-2.0
#pragma once

#include <stdexcept>
#include <string>

namespace crossan {

class Error : public std::runtime_error {
   public:
    using std::runtime_error::runtime_error;
};

// Bad user input: configs, flags, missing files. The CLI maps these to exit code 1.
class ConfigError : public Error {
   public:
    using Error::Error;
};

class DimensionError : public Error {
   public:
    using Error::Error;
};

class ContractError : public Error {
   public:
    using Error::Error;
};

class NumericError : public Error {
   public:
    using Error::Error;
};

class DomainError : public Error {
   public:
    using Error::Error;
};

class RangeError : public Error {
   public:
    using Error::Error;
};

class FormatError : public Error {
   public:
    using Error::Error;
};

class ChecksumError : public FormatError {
   public:
    using FormatError::FormatError;
};

class IntegrityError : public Error {
   public:
    using Error::Error;
};

class IoError : public Error {
   public:
    using Error::Error;
};

class EquivalenceError : public Error {
   public:
    using Error::Error;
};

}  // namespace crossan
