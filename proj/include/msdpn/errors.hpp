#pragma once

#include <cstdint>
#include <stdexcept>
#include <string>

namespace msdpn {

/// Malformed file content (bad magic, version, truncation, syntax).
class FormatError : public std::runtime_error {
 public:
  explicit FormatError(const std::string& what, std::int64_t offset = -1)
      : std::runtime_error(offset >= 0 ? what + " (at byte offset " + std::to_string(offset) + ")"
                                       : what),
        detail_(what),
        offset_(offset) {}
  std::int64_t offset() const { return offset_; }
  /// Same error with a context prefix (usually the file name).
  FormatError with_context(const std::string& prefix) const {
    return FormatError(prefix + ": " + detail_, offset_);
  }

 private:
  std::string detail_;
  std::int64_t offset_;
};

/// A file or directory that should exist could not be opened.
class MissingFileError : public std::runtime_error {
 public:
  explicit MissingFileError(const std::string& path)
      : std::runtime_error("cannot open '" + path + "'"), path_(path) {}
  const std::string& path() const { return path_; }

 private:
  std::string path_;
};

/// Invalid user configuration or arguments.
class ConfigError : public std::invalid_argument {
 public:
  using std::invalid_argument::invalid_argument;
};

}  // namespace msdpn
