#pragma once

#include <stdexcept>
#include <string>

namespace e4srec {

// Base for everything thrown by the library.
class Error : public std::runtime_error {
 public:
  using std::runtime_error::runtime_error;
};

// Operand shapes do not conform; message names the op and the shapes.
class ShapeError : public Error {
 public:
  using Error::Error;
};

// A forward op produced NaN/Inf, or training diverged.
class NumericError : public Error {
 public:
  using Error::Error;
};

// An API precondition was violated (non-scalar loss, bad target, ...).
class ContractError : public Error {
 public:
  using Error::Error;
};

class IoError : public Error {
 public:
  using Error::Error;
};

// A filter or load left nothing to work with.
class EmptyDatasetError : public Error {
 public:
  using Error::Error;
};

class ConfigError : public Error {
 public:
  using Error::Error;
};

// A pipeline stage was requested before its prerequisites exist.
class StageOrderError : public Error {
 public:
  StageOrderError(const std::string& what, std::string missing_stage)
      : Error(what), missing_stage_(std::move(missing_stage)) {}
  const std::string& missing_stage() const { return missing_stage_; }

 private:
  std::string missing_stage_;
};

}  // namespace e4srec
