#pragma once

#include <stdexcept>
#include <string>

namespace leaml {

/// Base class for every error raised by the library.
class Error : public std::runtime_error {
 public:
  using std::runtime_error::runtime_error;
};

/// Operand shapes do not agree.
class DimensionError : public Error {
 public:
  using Error::Error;
};

/// Arguments violate an operation's precondition.
class InvalidInput : public Error {
 public:
  using Error::Error;
};

/// Object is not in a state that allows the requested operation.
class InvalidState : public Error {
 public:
  using Error::Error;
};

/// Text would need to be truncated to fit the sequence budget.
class TruncationError : public Error {
 public:
  using Error::Error;
};

/// Training produced a non-finite loss.
class DivergenceError : public Error {
 public:
  DivergenceError(const std::string& stage, long step)
      : Error(stage + ": loss diverged at step " + std::to_string(step)),
        step_(step) {}
  long step() const { return step_; }

 private:
  long step_;
};

/// Malformed dataset or metrics file.
class FormatError : public Error {
 public:
  using Error::Error;
};

/// Remote endpoint unreachable or failing after all retries.
class TransportError : public Error {
 public:
  using Error::Error;
};

/// Remote endpoint answered with a body that does not follow the protocol.
class ProtocolError : public Error {
 public:
  using Error::Error;
};

}  // namespace leaml
