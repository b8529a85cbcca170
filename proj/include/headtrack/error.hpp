#pragma once

#include <stdexcept>
#include <string>
#include <string_view>

namespace headtrack {

enum class ErrorCode {
  NonPositiveDepth,
  InsufficientLandmarks,
  DegenerateConfiguration,
  BehindCamera,
  NoConvergence,
  DegenerateRay,
  ZeroBaseline,
  EmptyCloud,
  MissingNormals,
  EmptyOverlap,
  TooFewFrames,
  DegenerateHull,
  DimensionMismatch,
  UnknownLandmark,
  InvalidArgument,
  MissingModality,
  InsufficientOverlap,
  NoValidFrames,
  NonPositiveValue,
  UnknownKind,
  ResidualAboveThreshold,
  ParseError,
  IoError,
};

inline std::string_view to_string(ErrorCode code) {
  switch (code) {
    case ErrorCode::NonPositiveDepth: return "NonPositiveDepth";
    case ErrorCode::InsufficientLandmarks: return "InsufficientLandmarks";
    case ErrorCode::DegenerateConfiguration: return "DegenerateConfiguration";
    case ErrorCode::BehindCamera: return "BehindCamera";
    case ErrorCode::NoConvergence: return "NoConvergence";
    case ErrorCode::DegenerateRay: return "DegenerateRay";
    case ErrorCode::ZeroBaseline: return "ZeroBaseline";
    case ErrorCode::EmptyCloud: return "EmptyCloud";
    case ErrorCode::MissingNormals: return "MissingNormals";
    case ErrorCode::EmptyOverlap: return "EmptyOverlap";
    case ErrorCode::TooFewFrames: return "TooFewFrames";
    case ErrorCode::DegenerateHull: return "DegenerateHull";
    case ErrorCode::DimensionMismatch: return "DimensionMismatch";
    case ErrorCode::UnknownLandmark: return "UnknownLandmark";
    case ErrorCode::InvalidArgument: return "InvalidArgument";
    case ErrorCode::MissingModality: return "MissingModality";
    case ErrorCode::InsufficientOverlap: return "InsufficientOverlap";
    case ErrorCode::NoValidFrames: return "NoValidFrames";
    case ErrorCode::NonPositiveValue: return "NonPositiveValue";
    case ErrorCode::UnknownKind: return "UnknownKind";
    case ErrorCode::ResidualAboveThreshold: return "ResidualAboveThreshold";
    case ErrorCode::ParseError: return "ParseError";
    case ErrorCode::IoError: return "IoError";
  }
  return "Unknown";
}

inline ErrorCode error_code_from_string(std::string_view name) {
  for (int c = 0; c <= static_cast<int>(ErrorCode::IoError); ++c) {
    if (to_string(static_cast<ErrorCode>(c)) == name) return static_cast<ErrorCode>(c);
  }
  throw std::invalid_argument("unknown error code: " + std::string(name));
}

/// Exception carrying a machine-readable code. Every solver in the library
/// reports failure through this type; trackers convert it into per-frame
/// failure records instead of propagating it.
class Error : public std::runtime_error {
 public:
  Error(ErrorCode code, const std::string& what)
      : std::runtime_error(std::string(to_string(code)) + ": " + what), code_(code) {}

  ErrorCode code() const noexcept { return code_; }

 private:
  ErrorCode code_;
};

}  // namespace headtrack
