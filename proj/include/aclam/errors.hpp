#pragma once

#include <stdexcept>
#include <string>

namespace aclam {

/// A file could not be opened, read or written.
class IoError : public std::runtime_error {
 public:
  using std::runtime_error::runtime_error;
};

/// A file exists but its contents violate the documented format.
class FormatError : public std::runtime_error {
 public:
  using std::runtime_error::runtime_error;
};

/// The payload ended before the header said it would.
class TruncatedError : public FormatError {
 public:
  using FormatError::FormatError;
};

/// Invalid configuration value or unknown configuration key.
class ConfigError : public std::invalid_argument {
 public:
  ConfigError(std::string key, const std::string& what)
      : std::invalid_argument(key + ": " + what), key_(std::move(key)) {}
  const std::string& key() const { return key_; }

 private:
  std::string key_;
};

/// Stored arrays do not match the shapes the current configuration expects.
class CheckpointMismatchError : public std::runtime_error {
 public:
  using std::runtime_error::runtime_error;
};

}  // namespace aclam
