#pragma once

#include <cstddef>
#include <stdexcept>
#include <string>

namespace carkit {

// Errors are grouped by the CLI exit code they map to:
//   ConfigError  -> 1, BackendError -> 2, DataError -> 3.
// ArgumentError is a programming-contract violation; the CLI reports it as a
// config error because it can only be reached through bad flag values.

class Error : public std::runtime_error {
 public:
  using std::runtime_error::runtime_error;
};

class ConfigError : public Error {
 public:
  using Error::Error;
};

class ArgumentError : public Error {
 public:
  using Error::Error;
};

class DataError : public Error {
 public:
  using Error::Error;
};

// Malformed JSON line or otherwise unparsable record.
class ParseError : public DataError {
 public:
  ParseError(std::size_t line, const std::string& reason)
      : DataError("line " + std::to_string(line) + ": " + reason), line_(line) {}
  std::size_t line() const { return line_; }

 private:
  std::size_t line_;
};

// Required field missing or of the wrong type.
class SchemaError : public ParseError {
 public:
  using ParseError::ParseError;
};

class DuplicateKeyError : public ParseError {
 public:
  using ParseError::ParseError;
};

// Response with zero scoreable tokens where at least one is required.
class DegeneratePairError : public DataError {
 public:
  using DataError::DataError;
};

class DegenerateDatasetError : public DataError {
 public:
  using DataError::DataError;
};

class GeneratorMismatchError : public DataError {
 public:
  using DataError::DataError;
};

class BackendError : public Error {
 public:
  using Error::Error;
};

// Transport failure or timeout that survived every retry.
class BackendUnavailableError : public BackendError {
 public:
  using BackendError::BackendError;
};

// The backend does not offer the requested capability (e.g. no logprobs).
class CapabilityError : public BackendError {
 public:
  using BackendError::BackendError;
};

// The backend answered, but the payload does not follow the wire protocol.
class ProtocolError : public BackendError {
 public:
  using BackendError::BackendError;
};

class CacheError : public Error {
 public:
  CacheError(std::size_t offset, const std::string& reason)
      : Error("cache record at offset " + std::to_string(offset) + ": " + reason),
        offset_(offset) {}
  std::size_t offset() const { return offset_; }

 private:
  std::size_t offset_;
};

/// Call from a catch block: rethrows the in-flight BackendError with
/// `context` prepended, keeping its concrete type.
[[noreturn]] inline void rethrow_backend_error(const std::string& context) {
  try {
    throw;
  } catch (const BackendUnavailableError& e) {
    throw BackendUnavailableError(context + e.what());
  } catch (const CapabilityError& e) {
    throw CapabilityError(context + e.what());
  } catch (const ProtocolError& e) {
    throw ProtocolError(context + e.what());
  } catch (const BackendError& e) {
    throw BackendError(context + e.what());
  }
}

}  // namespace carkit
