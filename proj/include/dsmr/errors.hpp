#pragma once

#include <stdexcept>
#include <string>

namespace dsmr {

class Error : public std::runtime_error {
 public:
  using std::runtime_error::runtime_error;
};

/// Tensor or raster extents that violate an operation's shape requirements.
class DimensionError : public Error {
 public:
  using Error::Error;
};

/// API misuse, e.g. backward() on a non-scalar.
class ContractError : public Error {
 public:
  using Error::Error;
};

class ConfigError : public Error {
 public:
  using Error::Error;
};

/// Input data that cannot be used (all-nodata raster, region too small, ...).
class DataError : public Error {
 public:
  using Error::Error;
};

/// Unrecognized file magic or malformed header / manifest.
class FormatError : public DataError {
 public:
  using DataError::DataError;
};

/// Payload length disagrees with the declared header or manifest.
class PayloadError : public DataError {
 public:
  using DataError::DataError;
};

/// A checkpoint whose tensors do not fit the declared configuration.
class ShapeMismatchError : public DataError {
 public:
  using DataError::DataError;
};

class PlacementError : public DataError {
 public:
  using DataError::DataError;
};

/// Non-finite value encountered during training.
class NumericError : public Error {
 public:
  NumericError(std::string term, long step, const std::string& what)
      : Error(what), term_(std::move(term)), step_(step) {}
  const std::string& term() const { return term_; }
  long step() const { return step_; }

 private:
  std::string term_;
  long step_;
};

}  // namespace dsmr
