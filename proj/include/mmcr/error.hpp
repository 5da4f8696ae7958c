#pragma once

#include <stdexcept>
#include <string>

namespace mmcr {

// Failure categories. The CLI maps these onto exit codes.
enum class ErrorKind {
  usage,       // bad arguments or preconditions the caller controls
  data,        // malformed or inconsistent input data
  io,          // unreadable / unwritable files
  shape,       // tensor or image dimensions do not match the model
  corruption,  // damaged model or queue file
  schema,      // well-formed file in an unsupported layout/version
};

const char* to_string(ErrorKind kind);

class Error : public std::runtime_error {
 public:
  Error(ErrorKind kind, const std::string& message)
      : std::runtime_error(message), kind_(kind) {}

  ErrorKind kind() const noexcept { return kind_; }

 private:
  ErrorKind kind_;
};

[[noreturn]] inline void fail(ErrorKind kind, const std::string& message) {
  throw Error(kind, message);
}

}  // namespace mmcr
