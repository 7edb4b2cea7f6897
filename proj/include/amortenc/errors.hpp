#pragma once

#include <cstdint>
#include <stdexcept>
#include <string>

namespace amortenc {

// Base for every error raised by the library. The CLI maps subclasses onto
// exit codes (see cli.hpp).
class Error : public std::runtime_error {
 public:
  using std::runtime_error::runtime_error;
};

class ConfigError : public Error {
 public:
  using Error::Error;
};

class InputError : public Error {
 public:
  using Error::Error;
};

class ParameterError : public Error {
 public:
  using Error::Error;
};

class StorageError : public Error {
 public:
  using Error::Error;
};

class FormatError : public Error {
 public:
  FormatError(const std::string& what, std::uint64_t offset)
      : Error(what + " (at byte " + std::to_string(offset) + ")"), offset_(offset) {}

  std::uint64_t offset() const { return offset_; }

 private:
  std::uint64_t offset_;
};

class IngestionError : public Error {
 public:
  IngestionError(const std::string& what, std::size_t line)
      : Error(what + " (line " + std::to_string(line) + ")"), line_(line) {}

  std::size_t line() const { return line_; }

 private:
  std::size_t line_;
};

// Features or heads produced by a different encoder than the one in use.
class StaleEncoderError : public Error {
 public:
  using Error::Error;
};

class TrainingError : public Error {
 public:
  TrainingError(const std::string& what, std::size_t step)
      : Error(what + " (step " + std::to_string(step) + ")"), step_(step) {}

  std::size_t step() const { return step_; }

 private:
  std::size_t step_;
};

}  // namespace amortenc
