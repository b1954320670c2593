#pragma once

#include <stdexcept>
#include <string>

#include "sartm/config.hpp"

SARTM_NS_BEGIN

struct Error : std::runtime_error {
  using std::runtime_error::runtime_error;
};

// Shape/extent disagreement between operands.
struct ShapeError : Error {
  using Error::Error;
};

// Spatial geometry that does not divide evenly (strides, windows, patches).
struct GeometryError : Error {
  using Error::Error;
};

// Invalid or inconsistent configuration values.
struct ConfigError : Error {
  using Error::Error;
};

// Cross-modal fusion called on incompatible pyramids.
struct FusionError : Error {
  using Error::Error;
};

// Violated call contract (e.g. backward on a non-scalar).
struct ContractError : Error {
  using Error::Error;
};

// Malformed file content; message carries the byte offset.
struct ParseError : Error {
  using Error::Error;
};

// Non-finite values where finite ones are required.
struct NumericError : Error {
  using Error::Error;
};

SARTM_NS_END
