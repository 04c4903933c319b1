#pragma once

#include <stdexcept>
#include <string>

namespace dformer {

// Shape/extent disagreements between tensors.
struct DimensionError : std::runtime_error {
  using std::runtime_error::runtime_error;
};

// Invalid model/run configuration (divisibility, ranges, unknown keys).
struct ConfigurationError : std::runtime_error {
  using std::runtime_error::runtime_error;
};

// A single argument value is out of its legal range.
struct ParameterError : std::runtime_error {
  using std::runtime_error::runtime_error;
};

// An API usage rule was broken (wrong scope, wrong tape, non-scalar root).
struct ContractError : std::runtime_error {
  using std::runtime_error::runtime_error;
};

// NaN/Inf surfaced where finite values are required.
struct NumericError : std::runtime_error {
  using std::runtime_error::runtime_error;
};

// Malformed on-disk data.
struct FormatError : std::runtime_error {
  using std::runtime_error::runtime_error;
};

}  // namespace dformer
