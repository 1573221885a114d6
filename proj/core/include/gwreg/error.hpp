#pragma once

#include <stdexcept>
#include <string>

namespace gwreg {

/// Bad values passed to a library operation (shape mismatch, non-finite
/// input, out-of-range argument).
class InvalidInput : public std::invalid_argument {
 public:
  using std::invalid_argument::invalid_argument;
};

/// Bad run configuration (unknown keys, invalid field values, incompatible
/// checkpoint). CLI exit code 2.
class ConfigError : public std::runtime_error {
 public:
  using std::runtime_error::runtime_error;
};

/// Dataset/file problems. CLI exit code 3.
class DataError : public std::runtime_error {
 public:
  enum class Code { missing_file, size_mismatch, unsupported_version, bad_layout };
  DataError(Code code, const std::string& msg) : std::runtime_error(msg), code_(code) {}
  Code code() const { return code_; }

 private:
  Code code_;
};

}  // namespace gwreg
