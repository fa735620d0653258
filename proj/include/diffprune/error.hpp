#pragma once

#include <stdexcept>
#include <string>
#include <string_view>

namespace diffprune {

enum class ErrorCode {
  kShapeMismatch,
  kNonFinite,
  kInvalidArgument,
  kDimensionMismatch,
  kSegmentMismatch,
  kBadMagic,
  kBadVersion,
  kBadChecksum,
  kUnsortedPositions,
  kTruncated,
  kUnsupportedDimension,
  kDivergence,
  kConfig,
  kIo,
};

inline std::string_view to_string(ErrorCode code) {
  switch (code) {
    case ErrorCode::kShapeMismatch: return "shape mismatch";
    case ErrorCode::kNonFinite: return "non-finite value";
    case ErrorCode::kInvalidArgument: return "invalid argument";
    case ErrorCode::kDimensionMismatch: return "dimension mismatch";
    case ErrorCode::kSegmentMismatch: return "segment mismatch";
    case ErrorCode::kBadMagic: return "bad magic";
    case ErrorCode::kBadVersion: return "unsupported version";
    case ErrorCode::kBadChecksum: return "checksum mismatch";
    case ErrorCode::kUnsortedPositions: return "unsorted positions";
    case ErrorCode::kTruncated: return "truncated input";
    case ErrorCode::kUnsupportedDimension: return "unsupported dimension";
    case ErrorCode::kDivergence: return "divergence";
    case ErrorCode::kConfig: return "config error";
    case ErrorCode::kIo: return "i/o error";
  }
  return "unknown";
}

/// Every failure raised by the library carries a machine-readable code so
/// callers (and the CLI) can distinguish e.g. a checksum failure from a
/// truncated file without parsing the message.
class Error : public std::runtime_error {
 public:
  Error(ErrorCode code, const std::string& message)
      : std::runtime_error(std::string(to_string(code)) + ": " + message), code_(code) {}

  ErrorCode code() const noexcept { return code_; }

 private:
  ErrorCode code_;
};

[[noreturn]] inline void fail(ErrorCode code, const std::string& message) {
  throw Error(code, message);
}

inline void require(bool condition, ErrorCode code, const std::string& message) {
  if (!condition) fail(code, message);
}

}  // namespace diffprune
