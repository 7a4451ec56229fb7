#pragma once

#include <cstdint>
#include <stdexcept>
#include <string>

namespace synmesh {

// Every failure raised by the library derives from Error. The CLI maps the
// concrete type onto its exit code.
class Error : public std::runtime_error {
public:
  using std::runtime_error::runtime_error;
};

class ConfigError : public Error {
public:
  using Error::Error;
};

class ShapeError : public Error {
public:
  using Error::Error;
};

class DomainError : public Error {
public:
  using Error::Error;
};

class StateError : public Error {
public:
  using Error::Error;
};

class CapacityError : public Error {
public:
  using Error::Error;
};

class DegeneracyError : public Error {
public:
  using Error::Error;
};

// Loss went non-finite during optimization.
class TrainingError : public Error {
public:
  TrainingError(const std::string& what, std::int64_t step)
      : Error(what + " (step " + std::to_string(step) + ")"), step_(step) {}
  std::int64_t step() const { return step_; }

private:
  std::int64_t step_;
};

// I/O failures carry the byte offset at which reading stopped.
class IoError : public Error {
public:
  IoError(const std::string& what, std::uint64_t offset)
      : Error(what + " at offset " + std::to_string(offset)), offset_(offset) {}
  std::uint64_t offset() const { return offset_; }

private:
  std::uint64_t offset_;
};

// Wrong magic string or schema version.
class FormatError : public IoError {
public:
  using IoError::IoError;
};

// Missing input file.
class MissingInputError : public Error {
public:
  using Error::Error;
};

}  // namespace synmesh
