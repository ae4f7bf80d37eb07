#pragma once

#include <stdexcept>
#include <string>

namespace rhpo {

// Precondition / contract violations (bad task id, mismatched mixture sizes, ...).
struct ContractError : std::invalid_argument {
  explicit ContractError(const std::string& what) : std::invalid_argument(what) {}
};

// Tensor shape mismatches.
struct DimError : ContractError {
  explicit DimError(const std::string& what) : ContractError(what) {}
};

// Numerical failure that aborts a training step (NaN gradients etc.).
struct NumericalError : std::runtime_error {
  explicit NumericalError(const std::string& what) : std::runtime_error(what) {}
};

}  // namespace rhpo
