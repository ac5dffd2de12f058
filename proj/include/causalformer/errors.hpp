#pragma once

#include <stdexcept>
#include <string>

namespace causalformer {

/// Base class for every error raised by the library.
class Error : public std::runtime_error {
 public:
  using std::runtime_error::runtime_error;
};

/// Invalid configuration or arguments. The CLI maps this to exit code 1.
class ConfigError : public Error {
 public:
  using Error::Error;
};

class DimensionError : public Error {
 public:
  using Error::Error;
};

class IndexError : public Error {
 public:
  using Error::Error;
};

/// Attention row with no admissible key.
class MaskingError : public Error {
 public:
  using Error::Error;
};

/// Misuse of the gradient accumulators (double backward, step without grads).
class GradientStateError : public Error {
 public:
  using Error::Error;
};

/// Non-finite state during simulation or training.
class DivergenceError : public Error {
 public:
  using Error::Error;
};

/// Zero-variance input where a spread is required.
class DegenerateError : public Error {
 public:
  using Error::Error;
};

class EmptySplitError : public Error {
 public:
  using Error::Error;
};

class SingularityError : public Error {
 public:
  using Error::Error;
};

class NormalizationError : public Error {
 public:
  using Error::Error;
};

class UndefinedAurocError : public Error {
 public:
  using Error::Error;
};

class IoError : public Error {
 public:
  using Error::Error;
};

}  // namespace causalformer
