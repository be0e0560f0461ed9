#pragma once

#include <stdexcept>
#include <string>
#include <string_view>

namespace vokit {

enum class ErrorCode {
  kNonPositiveDepth,
  kSingularInput,
  kTooFewPairs,
  kDegenerateRig,
  kDegenerateGeometry,
  kTooFewPoints,
  kIllConditioned,
  kNegativeScale,
  kDivergedRefinement,
  kZeroTranslation,
  kDegenerateEpipolarLine,
  kUnobservable,
  kDivergedBA,
  kDensityUnreachable,
  kNonPositiveInput,
  kInvalidArgument,
  kConfig,
  kParse,
};

inline std::string_view ToString(ErrorCode code) {
  switch (code) {
    case ErrorCode::kNonPositiveDepth: return "NonPositiveDepth";
    case ErrorCode::kSingularInput: return "SingularInput";
    case ErrorCode::kTooFewPairs: return "TooFewPairs";
    case ErrorCode::kDegenerateRig: return "DegenerateRig";
    case ErrorCode::kDegenerateGeometry: return "DegenerateGeometry";
    case ErrorCode::kTooFewPoints: return "TooFewPoints";
    case ErrorCode::kIllConditioned: return "IllConditioned";
    case ErrorCode::kNegativeScale: return "NegativeScale";
    case ErrorCode::kDivergedRefinement: return "DivergedRefinement";
    case ErrorCode::kZeroTranslation: return "ZeroTranslation";
    case ErrorCode::kDegenerateEpipolarLine: return "DegenerateEpipolarLine";
    case ErrorCode::kUnobservable: return "Unobservable";
    case ErrorCode::kDivergedBA: return "DivergedBA";
    case ErrorCode::kDensityUnreachable: return "DensityUnreachable";
    case ErrorCode::kNonPositiveInput: return "NonPositiveInput";
    case ErrorCode::kInvalidArgument: return "InvalidArgument";
    case ErrorCode::kConfig: return "ConfigError";
    case ErrorCode::kParse: return "ParseError";
  }
  return "Unknown";
}

// All library failures are reported through this exception; `code()` lets
// callers branch without string matching.
class Error : public std::runtime_error {
 public:
  Error(ErrorCode code, const std::string& message)
      : std::runtime_error(std::string(ToString(code)) + ": " + message),
        code_(code) {}

  ErrorCode code() const noexcept { return code_; }

 private:
  ErrorCode code_;
};

}  // namespace vokit
