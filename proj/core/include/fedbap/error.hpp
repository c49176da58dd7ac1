#pragma once

#include <stdexcept>
#include <string>
#include <string_view>

namespace fedbap {

/// Error categories surfaced by the library. The CLI prints these as the
/// `error` field of its one-line diagnostic.
enum class ErrorKind {
  kShapeMismatch,
  kInvalidArgument,
  kOutOfRange,
  kParse,
  kUnknownKey,
  kIo,
  kFormat,
  kNumeric,
  kRetryExhausted,
};

std::string_view to_string(ErrorKind kind);

class Error : public std::runtime_error {
 public:
  Error(ErrorKind kind, std::string message, std::string key = {})
      : std::runtime_error(std::move(message)), kind_(kind), key_(std::move(key)) {}

  ErrorKind kind() const noexcept { return kind_; }
  /// Config key or primitive name the error refers to; may be empty.
  const std::string& key() const noexcept { return key_; }

 private:
  ErrorKind kind_;
  std::string key_;
};

}  // namespace fedbap
