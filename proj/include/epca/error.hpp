#pragma once

#include <stdexcept>
#include <string>

namespace epca {

/// Invalid argument values (out-of-range sizes, rates, labels, names).
class ArgumentError : public std::invalid_argument {
 public:
  using std::invalid_argument::invalid_argument;
};

/// Incompatible tensor shapes.
class DimensionError : public ArgumentError {
 public:
  using ArgumentError::ArgumentError;
};

/// Failures while reading checkpoints, images, configs or label files.
class LoadError : public std::runtime_error {
 public:
  using std::runtime_error::runtime_error;
};

/// Training aborted (non-finite loss or gradient, empty data).
class TrainingError : public std::runtime_error {
 public:
  using std::runtime_error::runtime_error;
};

inline void require(bool cond, const std::string& msg) {
  if (!cond) throw ArgumentError(msg);
}

inline void require_dims(bool cond, const std::string& msg) {
  if (!cond) throw DimensionError(msg);
}

}  // namespace epca
