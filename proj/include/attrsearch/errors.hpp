#pragma once

#include <stdexcept>
#include <string>

namespace attrsearch {

// Shape or extent mismatch between operands.
struct DimensionError : std::invalid_argument {
  using std::invalid_argument::invalid_argument;
};

struct IndexError : std::out_of_range {
  using std::out_of_range::out_of_range;
};

// API misuse, e.g. backpropagating a node that belongs to another tape.
struct UsageError : std::logic_error {
  using std::logic_error::logic_error;
};

struct ArgumentError : std::invalid_argument {
  using std::invalid_argument::invalid_argument;
};

struct NonFiniteError : std::domain_error {
  using std::domain_error::domain_error;
};

struct LoadError : std::runtime_error {
  using std::runtime_error::runtime_error;
};

struct SamplingError : std::runtime_error {
  using std::runtime_error::runtime_error;
};

// An (attribute, value) pair has no training image, so no prototype exists.
struct CoverageError : std::runtime_error {
  using std::runtime_error::runtime_error;
};

}  // namespace attrsearch
