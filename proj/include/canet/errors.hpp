// SPDX-License-Identifier: Apache-2.0
#pragma once

#include <stdexcept>
#include <string>
#include <string_view>

namespace canet {

/// Base of every error raised by the library. `code()` is a short stable
/// token used by the command line tool as a machine-parsable prefix.
class Error : public std::runtime_error {
 public:
  Error(std::string_view code, const std::string& message)
      : std::runtime_error(message), code_(code) {}

  std::string_view code() const noexcept { return code_; }

 private:
  std::string_view code_;
};

#define CANET_DEFINE_ERROR(Name, token)                                 \
  class Name : public Error {                                           \
   public:                                                              \
    explicit Name(const std::string& message) : Error(token, message) {} \
  };

CANET_DEFINE_ERROR(DimensionError, "dimension")
CANET_DEFINE_ERROR(SliceError, "slice")
CANET_DEFINE_ERROR(UsageError, "usage")
CANET_DEFINE_ERROR(NumericError, "numeric")
CANET_DEFINE_ERROR(DataError, "data")
CANET_DEFINE_ERROR(ConfigError, "config")
CANET_DEFINE_ERROR(IndexError, "index")
CANET_DEFINE_ERROR(ParseError, "parse")
CANET_DEFINE_ERROR(IoError, "io")
CANET_DEFINE_ERROR(FormatError, "format")

#undef CANET_DEFINE_ERROR

}  // namespace canet
