#include "edje/errors.hpp"

namespace edje {

const char* to_string(ErrorKind kind) {
  switch (kind) {
    case ErrorKind::kConfig: return "config";
    case ErrorKind::kDimension: return "dimension";
    case ErrorKind::kFormat: return "format";
    case ErrorKind::kNotFound: return "not-found";
    case ErrorKind::kConflict: return "conflict";
    case ErrorKind::kCorruption: return "corruption";
    case ErrorKind::kData: return "data";
    case ErrorKind::kNumeric: return "numeric";
    case ErrorKind::kIo: return "io";
  }
  return "unknown";
}

void rethrow_with_context(const Error& error, const std::string& context) {
  const std::string message = context + ": " + error.what();
  switch (error.kind()) {
    case ErrorKind::kConfig: throw ConfigError(message);
    case ErrorKind::kDimension: throw DimensionError(message);
    case ErrorKind::kFormat: throw FormatError(message);
    case ErrorKind::kNotFound: throw NotFoundError(message);
    case ErrorKind::kConflict: throw ConflictError(message);
    case ErrorKind::kCorruption: throw CorruptionError(message);
    case ErrorKind::kData: throw DataError(message);
    case ErrorKind::kNumeric: throw NumericError(message);
    case ErrorKind::kIo: throw IoError(message);
  }
  throw Error(error.kind(), message);
}

}  // namespace edje
