#pragma once

#include <stdexcept>
#include <string>

namespace selmask {

class Error : public std::runtime_error {
 public:
  using std::runtime_error::runtime_error;
};

/// Bad configuration, bad input file contents or schema violations.
class ConfigError : public Error {
 public:
  using Error::Error;
};

/// A token sequence that cannot be rendered or processed (e.g. leading "##").
class MalformedSequenceError : public Error {
 public:
  using Error::Error;
};

/// Training produced a non-finite loss.
class NumericError : public Error {
 public:
  using Error::Error;
};

/// Failure inside a named pipeline stage.
class StageError : public Error {
 public:
  StageError(std::string stage, const std::string& what)
      : Error(stage + ": " + what), stage_(std::move(stage)) {}

  const std::string& stage() const noexcept { return stage_; }

 private:
  std::string stage_;
};

}  // namespace selmask
