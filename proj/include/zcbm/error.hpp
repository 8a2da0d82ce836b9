#pragma once

#include <stdexcept>
#include <string>
#include <string_view>

namespace zcbm {

enum class ErrorCode {
  kInvalidArgument,
  kZeroNorm,
  kNonFinite,
  kDimensionMismatch,
  kBadMagic,
  kUnsupportedVersion,
  kTruncatedFile,
  kDimMismatch,  // header vs. payload length
  kIo,
  kProviderUnreachable,
  kProviderBadResponse,
  kTimeout,
  kEmptyBank,
  kEmptyClassSet,
  kEmptySamples,
  kLengthMismatch,
  kNoNonzeroConcepts,
  kEmptyReference,
  kTooFewConcepts,
  kDegenerateVariance,
  kUnknownSession,
  kExpiredSession,
};

std::string_view to_string(ErrorCode code);

class Error : public std::runtime_error {
 public:
  Error(ErrorCode code, const std::string& message)
      : std::runtime_error(message), code_(code) {}

  ErrorCode code() const noexcept { return code_; }

 private:
  ErrorCode code_;
};

[[noreturn]] inline void fail(ErrorCode code, const std::string& message) {
  throw Error(code, message);
}

}  // namespace zcbm
