#pragma once

#include <stdexcept>
#include <string>

namespace lpf {

// Base class for all library errors.
struct Error : std::runtime_error {
  explicit Error(const std::string& msg) : std::runtime_error(msg) {}
};

// Bad configuration or incompatible inputs (shape mismatches, empty gallery, ...).
struct ConfigError : Error {
  using Error::Error;
};

// Tensor / feature-map shape violations.
struct ShapeError : Error {
  using Error::Error;
};

// Numerically degenerate input (zero-norm embedding, empty mask).
struct DegenerateInputError : Error {
  using Error::Error;
};

// Segmentation produced no foreground.
struct EmptySegmentationError : Error {
  using Error::Error;
};

// Manifest / CSV / file parse failures.
struct ParseError : Error {
  using Error::Error;
};

// Probe identity not enrolled in a closed-set gallery.
struct ClosedSetViolation : Error {
  using Error::Error;
};

}  // namespace lpf
