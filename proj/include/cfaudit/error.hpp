#pragma once

#include <stdexcept>
#include <string>

namespace cfaudit {

// Process exit codes shared by every command.
enum class ExitCode : int {
  kOk = 0,
  kConfig = 2,
  kData = 3,
  kBackend = 4,
};

enum class ErrorKind {
  kConfig,    // bad configuration, missing paths, unknown names
  kArgument,  // caller violated an operation precondition
  kData,      // input data is unusable (decode failures, empty sets, ...)
  kBackend,   // classification backend or transport failure
};

class Error : public std::runtime_error {
 public:
  Error(ErrorKind kind, const std::string& what)
      : std::runtime_error(what), kind_(kind) {}

  ErrorKind kind() const noexcept { return kind_; }

  ExitCode exit_code() const noexcept {
    switch (kind_) {
      case ErrorKind::kConfig:
      case ErrorKind::kArgument:
        return ExitCode::kConfig;
      case ErrorKind::kData:
        return ExitCode::kData;
      case ErrorKind::kBackend:
        return ExitCode::kBackend;
    }
    return ExitCode::kData;
  }

 private:
  ErrorKind kind_;
};

class ConfigError : public Error {
 public:
  explicit ConfigError(const std::string& what) : Error(ErrorKind::kConfig, what) {}
};

class ArgumentError : public Error {
 public:
  explicit ArgumentError(const std::string& what)
      : Error(ErrorKind::kArgument, what) {}
};

class DataError : public Error {
 public:
  explicit DataError(const std::string& what) : Error(ErrorKind::kData, what) {}
};

class DecodeError : public DataError {
 public:
  using DataError::DataError;
};

class EmptyDatasetError : public DataError {
 public:
  using DataError::DataError;
};

class DuplicateIdError : public DataError {
 public:
  using DataError::DataError;
};

class NoFaceError : public DataError {
 public:
  using DataError::DataError;
};

class NormalizationUndefined : public DataError {
 public:
  using DataError::DataError;
};

class AnalysisError : public DataError {
 public:
  using DataError::DataError;
};

class NonFiniteLoss : public DataError {
 public:
  using DataError::DataError;
};

class BackendError : public Error {
 public:
  enum class Reason { kTransport, kThrottle, kProtocol, kSimulator };

  BackendError(Reason reason, const std::string& what)
      : Error(ErrorKind::kBackend, what), reason_(reason) {}

  Reason reason() const noexcept { return reason_; }
  bool retryable() const noexcept { return reason_ == Reason::kTransport; }

 private:
  Reason reason_;
};

}  // namespace cfaudit
