#pragma once

#include <stdexcept>
#include <string>

namespace cdua {

/// Failure classes. The CLI maps each one to its own exit code.
enum class ErrorKind {
  io,
  schema,
  validation,
  ordering,
  numeric,
  training_abort,
};

const char* to_string(ErrorKind kind);

class Error : public std::runtime_error {
 public:
  Error(ErrorKind kind, const std::string& what);
  ErrorKind kind() const { return kind_; }

 private:
  ErrorKind kind_;
};

[[noreturn]] void fail(ErrorKind kind, const std::string& what);

}  // namespace cdua
