#pragma once

#include <stdexcept>
#include <string>
#include <string_view>

namespace fas {

enum class ErrorCode {
  DegenerateAnchors,
  LengthMismatch,
  SingularTransform,
  EmptyBox,
  ShapeMismatch,
  TooFewFrames,
  BadSpatialSize,
  WrongLevelCount,
  WrongChannelCount,
  ChannelMismatch,
  InconsistentShapes,
  MissingClass,
  EmptyDataset,
  SingleClassDataset,
  InvalidConfig,
  InvalidInput,
  IOFailure,
  MissingArtifact,
};

inline std::string_view to_string(ErrorCode code) {
  switch (code) {
    case ErrorCode::DegenerateAnchors: return "DegenerateAnchors";
    case ErrorCode::LengthMismatch: return "LengthMismatch";
    case ErrorCode::SingularTransform: return "SingularTransform";
    case ErrorCode::EmptyBox: return "EmptyBox";
    case ErrorCode::ShapeMismatch: return "ShapeMismatch";
    case ErrorCode::TooFewFrames: return "TooFewFrames";
    case ErrorCode::BadSpatialSize: return "BadSpatialSize";
    case ErrorCode::WrongLevelCount: return "WrongLevelCount";
    case ErrorCode::WrongChannelCount: return "WrongChannelCount";
    case ErrorCode::ChannelMismatch: return "ChannelMismatch";
    case ErrorCode::InconsistentShapes: return "InconsistentShapes";
    case ErrorCode::MissingClass: return "MissingClass";
    case ErrorCode::EmptyDataset: return "EmptyDataset";
    case ErrorCode::SingleClassDataset: return "SingleClassDataset";
    case ErrorCode::InvalidConfig: return "InvalidConfig";
    case ErrorCode::InvalidInput: return "InvalidInput";
    case ErrorCode::IOFailure: return "IOFailure";
    case ErrorCode::MissingArtifact: return "MissingArtifact";
  }
  return "Unknown";
}

/// All library failures are reported through this exception; `code()`
/// identifies the failure class so callers (and the CLI exit-code mapping)
/// can branch on it without parsing messages.
class Error : public std::runtime_error {
 public:
  Error(ErrorCode code, const std::string& what)
      : std::runtime_error(std::string(to_string(code)) + ": " + what), code_(code) {}

  ErrorCode code() const noexcept { return code_; }

 private:
  ErrorCode code_;
};

inline void require(bool ok, ErrorCode code, const std::string& what) {
  if (!ok) throw Error(code, what);
}

}  // namespace fas
