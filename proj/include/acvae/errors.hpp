#pragma once

#include <stdexcept>
#include <string>

namespace acvae {

// Shape/usage violations: wrong dimensions, bad indices, malformed input.
struct ShapeError : std::runtime_error {
  explicit ShapeError(const std::string& msg) : std::runtime_error(msg) {}
};

// Parse/IO failures carrying enough context to locate the offending input.
struct ParseError : std::runtime_error {
  explicit ParseError(const std::string& msg) : std::runtime_error(msg) {}
};

// Non-finite values where finite ones are required (NaN gradients, diverged loss).
struct NumericError : std::runtime_error {
  explicit NumericError(const std::string& msg) : std::runtime_error(msg) {}
};

}  // namespace acvae
