#pragma once

#include <stdexcept>
#include <string>

namespace beear {

enum class ErrorCode {
  kDimension,
  kInvalidMask,
  kTapeState,
  kVocabulary,
  kSpan,
  kOutOfRange,
  kBadMagic,
  kVersionMismatch,
  kTruncated,
  kLength,
  kPoolExhausted,
  kInsufficientData,
  kEmptyTrigger,
  kNonFinite,
  kConfig,
  kNotFound,
  kIo,
};

const char* to_string(ErrorCode code);

// Single exception type for the library; callers branch on code().
class Error : public std::runtime_error {
 public:
  Error(ErrorCode code, const std::string& what)
      : std::runtime_error(std::string(to_string(code)) + ": " + what), code_(code) {}

  ErrorCode code() const noexcept { return code_; }

 private:
  ErrorCode code_;
};

inline const char* to_string(ErrorCode code) {
  switch (code) {
    case ErrorCode::kDimension: return "dimension error";
    case ErrorCode::kInvalidMask: return "invalid mask";
    case ErrorCode::kTapeState: return "tape state error";
    case ErrorCode::kVocabulary: return "vocabulary error";
    case ErrorCode::kSpan: return "span error";
    case ErrorCode::kOutOfRange: return "out of range";
    case ErrorCode::kBadMagic: return "bad magic";
    case ErrorCode::kVersionMismatch: return "version mismatch";
    case ErrorCode::kTruncated: return "truncated file";
    case ErrorCode::kLength: return "length error";
    case ErrorCode::kPoolExhausted: return "pool exhausted";
    case ErrorCode::kInsufficientData: return "insufficient data";
    case ErrorCode::kEmptyTrigger: return "empty trigger";
    case ErrorCode::kNonFinite: return "non-finite value";
    case ErrorCode::kConfig: return "config error";
    case ErrorCode::kNotFound: return "not found";
    case ErrorCode::kIo: return "i/o error";
  }
  return "error";
}

}  // namespace beear
