#pragma once

#include <stdexcept>
#include <string>

namespace ase {

/// Violated precondition of a public operation.
class ContractError : public std::logic_error {
 public:
  using std::logic_error::logic_error;
};

/// Operand extents do not fit together.
class DimensionError : public ContractError {
 public:
  using ContractError::ContractError;
};

/// NaN or Inf where a finite value is required.
class NumericError : public std::runtime_error {
 public:
  using std::runtime_error::runtime_error;
};

/// Malformed or unusable input data (files, configs, records).
class ValidationError : public std::runtime_error {
 public:
  using std::runtime_error::runtime_error;
};

}  // namespace ase
