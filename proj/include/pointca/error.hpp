#pragma once

#include <stdexcept>
#include <string>

namespace pointca {

enum class Errc {
  TooFewPoints,
  InvalidParam,
  SizeMismatch,
  EmptyCloud,
  TooLargeForExact,
  ZeroDenominator,
  EmptyInput,
  ShapeMismatch,
  NotScalar,
  StaleTape,
  EmptyDataset,
  IoError,
  VersionMismatch,
  ParseError,
  InvalidSpec,
  InvalidViewpoint,
  TooFewClasses,
  AllPointsRemoved,
  ModelUntrained,
  InvalidConfig,
};

inline const char* errc_name(Errc code) {
  switch (code) {
    case Errc::TooFewPoints: return "TooFewPoints";
    case Errc::InvalidParam: return "InvalidParam";
    case Errc::SizeMismatch: return "SizeMismatch";
    case Errc::EmptyCloud: return "EmptyCloud";
    case Errc::TooLargeForExact: return "TooLargeForExact";
    case Errc::ZeroDenominator: return "ZeroDenominator";
    case Errc::EmptyInput: return "EmptyInput";
    case Errc::ShapeMismatch: return "ShapeMismatch";
    case Errc::NotScalar: return "NotScalar";
    case Errc::StaleTape: return "StaleTape";
    case Errc::EmptyDataset: return "EmptyDataset";
    case Errc::IoError: return "IoError";
    case Errc::VersionMismatch: return "VersionMismatch";
    case Errc::ParseError: return "ParseError";
    case Errc::InvalidSpec: return "InvalidSpec";
    case Errc::InvalidViewpoint: return "InvalidViewpoint";
    case Errc::TooFewClasses: return "TooFewClasses";
    case Errc::AllPointsRemoved: return "AllPointsRemoved";
    case Errc::ModelUntrained: return "ModelUntrained";
    case Errc::InvalidConfig: return "InvalidConfig";
  }
  return "Unknown";
}

/// Every failure in the library is reported through this exception type.
class Error : public std::runtime_error {
 public:
  Error(Errc code, const std::string& what)
      : std::runtime_error(std::string(errc_name(code)) + ": " + what), code_(code), message_(what) {}

  Errc code() const noexcept { return code_; }
  /// The description without the code prefix.
  const std::string& message() const noexcept { return message_; }

 private:
  Errc code_;
  std::string message_;
};

}  // namespace pointca
