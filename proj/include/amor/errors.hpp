#pragma once

#include <stdexcept>

namespace amor {

/// Invalid or inconsistent configuration (task, model, training or experiment).
class ConfigError : public std::invalid_argument {
 public:
  using std::invalid_argument::invalid_argument;
};

/// Optimisation produced a non-finite loss or gradient.
class DivergenceError : public std::runtime_error {
 public:
  using std::runtime_error::runtime_error;
};

}  // namespace amor
