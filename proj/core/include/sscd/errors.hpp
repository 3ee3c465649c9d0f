#pragma once

#include <stdexcept>
#include <string>

namespace sscd {

struct Error : std::runtime_error {
  explicit Error(const std::string& what) : std::runtime_error(what) {}
};

// Tensor/layer shape and configuration violations.
struct ShapeError : Error {
  explicit ShapeError(const std::string& what) : Error(what) {}
};

// Malformed files, bad label values, unusable datasets.
struct DataError : Error {
  explicit DataError(const std::string& what) : Error(what) {}
};

// NaN gradients, diverged training, empty metric denominators.
struct NumericError : Error {
  explicit NumericError(const std::string& what) : Error(what) {}
};

}  // namespace sscd
