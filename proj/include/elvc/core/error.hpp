#pragma once

#include <stdexcept>
#include <string>
#include <string_view>

namespace elvc {

enum class ErrorCode {
  InvalidSymbol,
  EmptyInput,
  InvalidSpeechType,
  IoError,
  ConfigError,
  InputTooShort,
  InvalidInput,
  ShapeError,
  EmptyBatch,
  RangeError,
  EmptyReference,
  InsufficientVoicing,
  StaleArtifact,
  StageFailure,
};

constexpr std::string_view to_string(ErrorCode code) {
  switch (code) {
    case ErrorCode::InvalidSymbol: return "InvalidSymbol";
    case ErrorCode::EmptyInput: return "EmptyInput";
    case ErrorCode::InvalidSpeechType: return "InvalidSpeechType";
    case ErrorCode::IoError: return "IoError";
    case ErrorCode::ConfigError: return "ConfigError";
    case ErrorCode::InputTooShort: return "InputTooShort";
    case ErrorCode::InvalidInput: return "InvalidInput";
    case ErrorCode::ShapeError: return "ShapeError";
    case ErrorCode::EmptyBatch: return "EmptyBatch";
    case ErrorCode::RangeError: return "RangeError";
    case ErrorCode::EmptyReference: return "EmptyReference";
    case ErrorCode::InsufficientVoicing: return "InsufficientVoicing";
    case ErrorCode::StaleArtifact: return "StaleArtifact";
    case ErrorCode::StageFailure: return "StageFailure";
  }
  return "Unknown";
}

class Error : public std::runtime_error {
 public:
  Error(ErrorCode code, const std::string& what)
      : std::runtime_error(std::string(to_string(code)) + ": " + what), code_(code) {}

  ErrorCode code() const noexcept { return code_; }

 private:
  ErrorCode code_;
};

[[noreturn]] inline void fail(ErrorCode code, const std::string& what) { throw Error(code, what); }

inline void require(bool cond, ErrorCode code, const std::string& what) {
  if (!cond) fail(code, what);
}

}  // namespace elvc
