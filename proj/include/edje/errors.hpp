#pragma once

#include <stdexcept>
#include <string>

namespace edje {

enum class ErrorKind {
  kConfig,
  kDimension,
  kFormat,
  kNotFound,
  kConflict,
  kCorruption,
  kData,
  kNumeric,
  kIo,
};

const char* to_string(ErrorKind kind);

/// Base of every error thrown by the library. The kind drives CLI exit codes.
class Error : public std::runtime_error {
 public:
  Error(ErrorKind kind, const std::string& message)
      : std::runtime_error(message), kind_(kind) {}

  ErrorKind kind() const noexcept { return kind_; }

 private:
  ErrorKind kind_;
};

#define EDJE_DEFINE_ERROR(Name, Kind)                                  \
  class Name : public Error {                                          \
   public:                                                             \
    explicit Name(const std::string& message) : Error(Kind, message) {} \
  };

EDJE_DEFINE_ERROR(ConfigError, ErrorKind::kConfig)
EDJE_DEFINE_ERROR(DimensionError, ErrorKind::kDimension)
EDJE_DEFINE_ERROR(FormatError, ErrorKind::kFormat)
EDJE_DEFINE_ERROR(NotFoundError, ErrorKind::kNotFound)
EDJE_DEFINE_ERROR(ConflictError, ErrorKind::kConflict)
EDJE_DEFINE_ERROR(CorruptionError, ErrorKind::kCorruption)
EDJE_DEFINE_ERROR(DataError, ErrorKind::kData)
EDJE_DEFINE_ERROR(NumericError, ErrorKind::kNumeric)
EDJE_DEFINE_ERROR(IoError, ErrorKind::kIo)

#undef EDJE_DEFINE_ERROR

/// Rethrows `error` as the same concrete type with `context` prepended.
[[noreturn]] void rethrow_with_context(const Error& error,
                                       const std::string& context);

}  // namespace edje
