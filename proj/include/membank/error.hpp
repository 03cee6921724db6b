#pragma once

#include <cstddef>
#include <stdexcept>
#include <string>

namespace membank {

// Root of every error raised by the library. The CLI maps subclasses to exit
// codes: ArgumentError -> 1, data errors -> 2, NumericError -> 3.
class Error : public std::runtime_error {
 public:
  using std::runtime_error::runtime_error;
};

class ShapeError : public Error {
 public:
  using Error::Error;
};

class ArgumentError : public Error {
 public:
  using Error::Error;
};

class EncodingError : public Error {
 public:
  using Error::Error;
};

// Raised while building a bank; carries the zero-based index of the offending
// record.
class BuildError : public Error {
 public:
  BuildError(std::size_t record, const std::string& what)
      : Error("record " + std::to_string(record) + ": " + what), record_(record) {}

  std::size_t record() const noexcept { return record_; }

 private:
  std::size_t record_;
};

class LoadError : public Error {
 public:
  LoadError(std::size_t offset, const std::string& what)
      : Error(what + " at byte offset " + std::to_string(offset)), offset_(offset) {}

  std::size_t offset() const noexcept { return offset_; }

 private:
  std::size_t offset_;
};

class VersionMismatch : public Error {
 public:
  using Error::Error;
};

class NumericError : public Error {
 public:
  using Error::Error;
};

// Non-finite value during training, tagged with the 1-based step.
class DivergenceError : public NumericError {
 public:
  DivergenceError(std::size_t step, const std::string& what)
      : NumericError("diverged at step " + std::to_string(step) + ": " + what), step_(step) {}
  std::size_t step() const noexcept { return step_; }

 private:
  std::size_t step_;
};

}  // namespace membank
