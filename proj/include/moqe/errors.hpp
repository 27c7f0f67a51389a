// SPDX-License-Identifier: Apache-2.0
#pragma once

#include <stdexcept>
#include <string>

namespace moqe {

class Error : public std::runtime_error {
 public:
  using std::runtime_error::runtime_error;
};

// Shape or broadcast mismatch.
class DimensionError : public Error {
 public:
  using Error::Error;
};

class ConfigError : public Error {
 public:
  using Error::Error;
};

class IndexError : public Error {
 public:
  using Error::Error;
};

// Non-finite or malformed data.
class DataError : public Error {
 public:
  using Error::Error;
};

// A precondition of an operation was violated by the caller.
class ContractError : public Error {
 public:
  using Error::Error;
};

class RegistrationError : public Error {
 public:
  using Error::Error;
};

class TrainingError : public Error {
 public:
  using Error::Error;
};

class CapacityError : public Error {
 public:
  using Error::Error;
};

// Digest mismatch on a persisted artifact.
class IntegrityError : public Error {
 public:
  using Error::Error;
};

// A pipeline stage is missing an upstream artifact.
class DependencyError : public Error {
 public:
  using Error::Error;
};

}  // namespace moqe
