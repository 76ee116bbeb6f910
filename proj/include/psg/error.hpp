#pragma once

#include <stdexcept>
#include <string>

namespace psg {

enum class ErrorCode {
  // data / manifests
  MissingFile,
  DuplicateId,
  SchemaError,
  UnknownId,
  DecodeError,
  BadRatios,
  EmptyScores,
  // model config / shapes
  BadScale,
  ShapeMismatch,
  WrongCount,
  DimMismatch,
  BadRatio,
  BadShape,
  InconsistentFlags,
  // text backends
  MissingEmbedding,
  EmptyText,
  // losses / metrics
  TooSmall,
  ZeroVector,
  // pipeline
  NonFiniteLoss,
  DataError,
  IOError,
  CheckpointError,
  // engine misuse
  Internal,
};

inline const char* error_code_name(ErrorCode c) {
  switch (c) {
    case ErrorCode::MissingFile: return "MissingFile";
    case ErrorCode::DuplicateId: return "DuplicateId";
    case ErrorCode::SchemaError: return "SchemaError";
    case ErrorCode::UnknownId: return "UnknownId";
    case ErrorCode::DecodeError: return "DecodeError";
    case ErrorCode::BadRatios: return "BadRatios";
    case ErrorCode::EmptyScores: return "EmptyScores";
    case ErrorCode::BadScale: return "BadScale";
    case ErrorCode::ShapeMismatch: return "ShapeMismatch";
    case ErrorCode::WrongCount: return "WrongCount";
    case ErrorCode::DimMismatch: return "DimMismatch";
    case ErrorCode::BadRatio: return "BadRatio";
    case ErrorCode::BadShape: return "BadShape";
    case ErrorCode::InconsistentFlags: return "InconsistentFlags";
    case ErrorCode::MissingEmbedding: return "MissingEmbedding";
    case ErrorCode::EmptyText: return "EmptyText";
    case ErrorCode::TooSmall: return "TooSmall";
    case ErrorCode::ZeroVector: return "ZeroVector";
    case ErrorCode::NonFiniteLoss: return "NonFiniteLoss";
    case ErrorCode::DataError: return "DataError";
    case ErrorCode::IOError: return "IOError";
    case ErrorCode::CheckpointError: return "CheckpointError";
    case ErrorCode::Internal: return "Internal";
  }
  return "Unknown";
}

class Error : public std::runtime_error {
 public:
  Error(ErrorCode code, const std::string& message)
      : std::runtime_error(std::string(error_code_name(code)) + ": " + message), code_(code) {}

  ErrorCode code() const noexcept { return code_; }

 private:
  ErrorCode code_;
};

}  // namespace psg
