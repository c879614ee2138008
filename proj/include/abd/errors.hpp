#pragma once

#include <stdexcept>
#include <string>

namespace abd {

/// Process exit codes shared by every command-line workflow.
enum class ExitCode : int { kOk = 0, kDataError = 2, kUsage = 64, kNumerical = 70 };

/// Base class; `exit_code()` tells the CLI how to terminate.
class Error : public std::runtime_error {
 public:
  using std::runtime_error::runtime_error;
  virtual ExitCode exit_code() const { return ExitCode::kDataError; }
};

// Morphology / data errors (exit 2).
class ParseError : public Error { using Error::Error; };
class CycleError : public ParseError { using ParseError::ParseError; };
class MultiRootError : public ParseError { using ParseError::ParseError; };
class MissingInertiaError : public ParseError { using ParseError::ParseError; };
class BadAxisError : public ParseError { using ParseError::ParseError; };
class UnsupportedJointError : public ParseError { using ParseError::ParseError; };
class UnknownLinkError : public Error { using Error::Error; };
class TreeMismatchError : public Error { using Error::Error; };
class EmptyDatasetError : public Error { using Error::Error; };

// Shape / dimension errors are programming or configuration mistakes.
class ShapeError : public Error {
 public:
  using Error::Error;
  ExitCode exit_code() const override { return ExitCode::kUsage; }
};
class DimensionError : public ShapeError { using ShapeError::ShapeError; };
class NotScalarError : public ShapeError { using ShapeError::ShapeError; };
class ConfigError : public Error {
 public:
  using Error::Error;
  ExitCode exit_code() const override { return ExitCode::kUsage; }
};

// Numerical failures (exit 70).
class NumericalError : public Error {
 public:
  using Error::Error;
  ExitCode exit_code() const override { return ExitCode::kNumerical; }
};
class SingularJointInertiaError : public NumericalError { using NumericalError::NumericalError; };
class NonPosDefMassMatrixError : public NumericalError { using NumericalError::NumericalError; };
class NaNLossError : public NumericalError {
 public:
  NaNLossError(const std::string& what, long iteration) : NumericalError(what), iteration_(iteration) {}
  long iteration() const { return iteration_; }

 private:
  long iteration_;
};

}  // namespace abd
