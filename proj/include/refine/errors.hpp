#pragma once

#include <stdexcept>
#include <string>
#include <string_view>

namespace refine {

enum class ErrorKind {
  ShapeMismatch,
  DomainError,
  PlanMismatch,
  InvalidTarget,
  UnknownToken,
  ConstraintError,
  IndexError,
  IOFailure,
  TooFewSamples,
  ImageTooSmall,
  ConfigError,
  ValidityRefusal,
  NumericFailure,
  MissingArtifact,
  GroundTruthExposure,
};

constexpr std::string_view to_string(ErrorKind kind) {
  switch (kind) {
    case ErrorKind::ShapeMismatch: return "ShapeMismatch";
    case ErrorKind::DomainError: return "DomainError";
    case ErrorKind::PlanMismatch: return "PlanMismatch";
    case ErrorKind::InvalidTarget: return "InvalidTarget";
    case ErrorKind::UnknownToken: return "UnknownToken";
    case ErrorKind::ConstraintError: return "ConstraintError";
    case ErrorKind::IndexError: return "IndexError";
    case ErrorKind::IOFailure: return "IOFailure";
    case ErrorKind::TooFewSamples: return "TooFewSamples";
    case ErrorKind::ImageTooSmall: return "ImageTooSmall";
    case ErrorKind::ConfigError: return "ConfigError";
    case ErrorKind::ValidityRefusal: return "ValidityRefusal";
    case ErrorKind::NumericFailure: return "NumericFailure";
    case ErrorKind::MissingArtifact: return "MissingArtifact";
    case ErrorKind::GroundTruthExposure: return "GroundTruthExposure";
  }
  return "Unknown";
}

/// Single exception type for the library; callers branch on kind().
class Error : public std::runtime_error {
 public:
  Error(ErrorKind kind, const std::string& what)
      : std::runtime_error(std::string(to_string(kind)) + ": " + what), kind_(kind) {}

  ErrorKind kind() const noexcept { return kind_; }

 private:
  ErrorKind kind_;
};

inline void require(bool cond, ErrorKind kind, const std::string& what) {
  if (!cond) throw Error(kind, what);
}

}  // namespace refine
