#include "zcbm/error.hpp"

namespace zcbm {

std::string_view to_string(ErrorCode code) {
  switch (code) {
    case ErrorCode::kInvalidArgument: return "InvalidArgument";
    case ErrorCode::kZeroNorm: return "ZeroNorm";
    case ErrorCode::kNonFinite: return "NonFinite";
    case ErrorCode::kDimensionMismatch: return "DimensionMismatch";
    case ErrorCode::kBadMagic: return "BadMagic";
    case ErrorCode::kUnsupportedVersion: return "UnsupportedVersion";
    case ErrorCode::kTruncatedFile: return "TruncatedFile";
    case ErrorCode::kDimMismatch: return "DimMismatch";
    case ErrorCode::kIo: return "Io";
    case ErrorCode::kProviderUnreachable: return "ProviderUnreachable";
    case ErrorCode::kProviderBadResponse: return "ProviderBadResponse";
    case ErrorCode::kTimeout: return "Timeout";
    case ErrorCode::kEmptyBank: return "EmptyBank";
    case ErrorCode::kEmptyClassSet: return "EmptyClassSet";
    case ErrorCode::kEmptySamples: return "EmptySamples";
    case ErrorCode::kLengthMismatch: return "LengthMismatch";
    case ErrorCode::kNoNonzeroConcepts: return "NoNonzeroConcepts";
    case ErrorCode::kEmptyReference: return "EmptyReference";
    case ErrorCode::kTooFewConcepts: return "TooFewConcepts";
    case ErrorCode::kDegenerateVariance: return "DegenerateVariance";
    case ErrorCode::kUnknownSession: return "UnknownSession";
    case ErrorCode::kExpiredSession: return "ExpiredSession";
  }
  return "Unknown";
}

}  // namespace zcbm
