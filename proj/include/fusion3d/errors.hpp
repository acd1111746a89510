#pragma once

#include <stdexcept>
#include <string>

namespace fusion3d {

// Base class for all library errors. The CLI maps subclasses onto exit codes.
class Error : public std::runtime_error {
 public:
  using std::runtime_error::runtime_error;
};

// Tensor shapes do not agree with an operation's contract.
class DimensionError : public Error {
 public:
  using Error::Error;
};

// Invalid configuration (bad MLP spec, unknown config key, out-of-range value).
class ConfigError : public Error {
 public:
  using Error::Error;
};

// Caller-supplied data violates an operation's precondition.
class InputError : public Error {
 public:
  using Error::Error;
};

// A computation produced NaN or Inf.
class NumericError : public Error {
 public:
  using Error::Error;
};

// Malformed file content. The message names the offending line or key.
class ParseError : public Error {
 public:
  using Error::Error;
};

// Synthetic scene generation could not satisfy its constraints.
class GenerationError : public Error {
 public:
  using Error::Error;
};

// Checkpoint is corrupt or incompatible with the model configuration.
class CheckpointError : public Error {
 public:
  using Error::Error;
};

}  // namespace fusion3d
