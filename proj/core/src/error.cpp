#include "fedbap/error.hpp"

namespace fedbap {

std::string_view to_string(ErrorKind kind) {
  switch (kind) {
    case ErrorKind::kShapeMismatch: return "shape_mismatch";
    case ErrorKind::kInvalidArgument: return "invalid_argument";
    case ErrorKind::kOutOfRange: return "out_of_range";
    case ErrorKind::kParse: return "parse";
    case ErrorKind::kUnknownKey: return "unknown_key";
    case ErrorKind::kIo: return "io";
    case ErrorKind::kFormat: return "format";
    case ErrorKind::kNumeric: return "numeric";
    case ErrorKind::kRetryExhausted: return "retry_exhausted";
  }
  return "unknown";
}

}  // namespace fedbap
