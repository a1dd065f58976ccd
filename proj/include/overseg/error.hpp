#pragma once

#include <stdexcept>
#include <string>

namespace overseg {

enum class ErrorKind { Shape, Validation, Format, Io, State, Numeric };

// Every failure raised by the library derives from Error and carries a kind
// so the CLI can map it onto an exit code.
class Error : public std::runtime_error {
 public:
  Error(ErrorKind kind, const std::string& what) : std::runtime_error(what), kind_(kind) {}
  ErrorKind kind() const noexcept { return kind_; }

 private:
  ErrorKind kind_;
};

struct ShapeError : Error {
  explicit ShapeError(const std::string& w) : Error(ErrorKind::Shape, "shape error: " + w) {}
};
struct ValidationError : Error {
  explicit ValidationError(const std::string& w) : Error(ErrorKind::Validation, "validation error: " + w) {}
};
struct FormatError : Error {
  explicit FormatError(const std::string& w) : Error(ErrorKind::Format, "format error: " + w) {}
};
struct IoError : Error {
  explicit IoError(const std::string& w) : Error(ErrorKind::Io, "I/O error: " + w) {}
};
struct StateError : Error {
  explicit StateError(const std::string& w) : Error(ErrorKind::State, "state error: " + w) {}
};
struct NumericError : Error {
  explicit NumericError(const std::string& w) : Error(ErrorKind::Numeric, "numerical error: " + w) {}
};

// 0 success, 1 validation/usage, 2 numerical failure, 3 I/O.
inline int exit_code(ErrorKind kind) {
  switch (kind) {
    case ErrorKind::Numeric: return 2;
    case ErrorKind::Io:
    case ErrorKind::Format: return 3;
    default: return 1;
  }
}

}  // namespace overseg
