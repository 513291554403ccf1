#pragma once

#include <stdexcept>
#include <string>

namespace ghfeat {

// Raised when a caller breaks a documented precondition (shapes, ranges, kinds).
class ContractViolation : public std::invalid_argument {
 public:
  using std::invalid_argument::invalid_argument;
};

// Invalid or inconsistent configuration detected at construction time.
class ConfigurationError : public std::runtime_error {
 public:
  using std::runtime_error::runtime_error;
};

// The requested operation is not available in the current configuration.
class UnsupportedConfiguration : public std::runtime_error {
 public:
  using std::runtime_error::runtime_error;
};

class ArchiveError : public std::runtime_error {
 public:
  using std::runtime_error::runtime_error;
};

class ArchiveVersionError : public ArchiveError {
 public:
  using ArchiveError::ArchiveError;
};

class ArchiveCorruptionError : public ArchiveError {
 public:
  using ArchiveError::ArchiveError;
};

// Dataset ingestion failure; carries the offending path when there is one.
class DataError : public std::runtime_error {
 public:
  DataError(const std::string& message, std::string path = {})
      : std::runtime_error(path.empty() ? message : message + ": " + path), path_(std::move(path)) {}

  const std::string& path() const noexcept { return path_; }

 private:
  std::string path_;
};

// A training loss became non-finite. snapshot_path points at the dumped state.
class TrainingDiverged : public std::runtime_error {
 public:
  TrainingDiverged(const std::string& message, std::string snapshot_path)
      : std::runtime_error(message + " (snapshot: " + snapshot_path + ")"),
        snapshot_path_(std::move(snapshot_path)) {}

  const std::string& snapshot_path() const noexcept { return snapshot_path_; }

 private:
  std::string snapshot_path_;
};

#define GHFEAT_EXPECT(cond, msg)                    \
  do {                                              \
    if (!(cond)) throw ::ghfeat::ContractViolation(msg); \
  } while (0)

}  // namespace ghfeat
