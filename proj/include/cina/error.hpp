#pragma once

#include <stdexcept>
#include <string>

namespace cina {

/// Base class for every error raised by the library.
class Error : public std::runtime_error {
 public:
  using std::runtime_error::runtime_error;
};

/// Malformed input file; the message names the offending row/column.
class ParseError : public Error {
 public:
  using Error::Error;
};

/// Input violates a documented invariant (non-binary treatment, shape mismatch, ...).
class ValidationError : public Error {
 public:
  using Error::Error;
};

/// A dataset with an empty treated or control group.
class DegenerateDatasetError : public ValidationError {
 public:
  using ValidationError::ValidationError;
};

/// Kernel entries would overflow exp().
class KernelOverflowError : public Error {
 public:
  using Error::Error;
};

/// Iterative solver hit its iteration cap before meeting tolerance.
class ConvergenceError : public Error {
 public:
  ConvergenceError(const std::string& what, double residual, long iterations)
      : Error(what), residual_(residual), iterations_(iterations) {}
  double residual() const noexcept { return residual_; }
  long iterations() const noexcept { return iterations_; }

 private:
  double residual_;
  long iterations_;
};

/// Invalid configuration (incompatible flags, bad ranges).
class ConfigError : public Error {
 public:
  using Error::Error;
};

/// Training produced a non-finite loss.
class TrainingError : public Error {
 public:
  TrainingError(const std::string& what, long epoch) : Error(what), epoch_(epoch) {}
  long epoch() const noexcept { return epoch_; }

 private:
  long epoch_;
};

}  // namespace cina
