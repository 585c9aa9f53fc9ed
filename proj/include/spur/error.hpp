#pragma once

#include <cstdint>
#include <stdexcept>
#include <string>

namespace spur {

enum class ErrorCode {
  kIo,
  kBadMagic,
  kVersionMismatch,
  kTruncated,
  kTrailingBytes,
  kNonFinite,
  kDimensionMismatch,
  kInvalidArgument,
  kDegenerateClass,
  kNotConverged,
  kOutOfRange,
  kParse,
};

inline const char* to_string(ErrorCode c) {
  switch (c) {
    case ErrorCode::kIo: return "io";
    case ErrorCode::kBadMagic: return "bad_magic";
    case ErrorCode::kVersionMismatch: return "version_mismatch";
    case ErrorCode::kTruncated: return "truncated";
    case ErrorCode::kTrailingBytes: return "trailing_bytes";
    case ErrorCode::kNonFinite: return "non_finite";
    case ErrorCode::kDimensionMismatch: return "dimension_mismatch";
    case ErrorCode::kInvalidArgument: return "invalid_argument";
    case ErrorCode::kDegenerateClass: return "degenerate_class";
    case ErrorCode::kNotConverged: return "not_converged";
    case ErrorCode::kOutOfRange: return "out_of_range";
    case ErrorCode::kParse: return "parse";
  }
  return "unknown";
}

// Data/validation failure. `offset` is the byte offset for format errors, -1 otherwise.
class Error : public std::runtime_error {
 public:
  Error(ErrorCode code, const std::string& what, std::int64_t offset = -1)
      : std::runtime_error(format(code, what, offset)), code_(code), offset_(offset) {}

  ErrorCode code() const { return code_; }
  std::int64_t offset() const { return offset_; }

 private:
  static std::string format(ErrorCode code, const std::string& what, std::int64_t offset) {
    std::string s = std::string("[") + to_string(code) + "] " + what;
    if (offset >= 0) s += " (at byte " + std::to_string(offset) + ")";
    return s;
  }

  ErrorCode code_;
  std::int64_t offset_;
};

}  // namespace spur
