#pragma once

#include <stdexcept>
#include <string>

namespace maet {

/// Data or format error raised by any pipeline operation.
class Error : public std::runtime_error {
 public:
  using std::runtime_error::runtime_error;
};

/// Caller passed an out-of-range hyper-parameter or a malformed option.
class InvalidArgument : public Error {
 public:
  using Error::Error;
};

}  // namespace maet
