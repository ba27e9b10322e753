#pragma once

#include <stdexcept>
#include <string>

namespace qlmm {

enum class ErrorCode {
  InvalidArgument = 1,
  DimensionMismatch = 2,
  Numerical = 3,
  NotIdentifiable = 4,
  Io = 5,
  Parse = 6,
};

/// Base exception for every failure raised by the library.
class Error : public std::runtime_error {
 public:
  Error(ErrorCode code, const std::string& what)
      : std::runtime_error(what), code_(code) {}

  ErrorCode code() const noexcept { return code_; }

 private:
  ErrorCode code_;
};

[[noreturn]] inline void fail(ErrorCode code, const std::string& what) {
  throw Error(code, what);
}

}  // namespace qlmm
