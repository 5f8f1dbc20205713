#pragma once

#include <stdexcept>
#include <string>
#include <string_view>

namespace wsforge {

enum class ErrorCode {
  // frame
  ControlFrameTooLong,
  InvalidUtf8,
  ProtocolViolation,
  MessageTooBig,
  // handshake / http
  NotAnUpgrade,
  MalformedHttp,
  InvalidKey,
  BadStatus,
  BadAccept,
  // batch
  TruncatedEnvelope,
  TrailingGarbage,
  // cluster
  PortInUse,
  SpawnFailure,
  NoWorkerAvailable,
  // loadgen
  TargetUnreachable,
  UnknownPreset,
  NoTransports,
  // metrics / io
  PermissionDenied,
  IoError,
  // analysis
  DivergesAtOne,
  DegenerateInput,
  // config
  BadConfig,
};

constexpr std::string_view to_string(ErrorCode code) noexcept {
  switch (code) {
    case ErrorCode::ControlFrameTooLong: return "ControlFrameTooLong";
    case ErrorCode::InvalidUtf8: return "InvalidUtf8";
    case ErrorCode::ProtocolViolation: return "ProtocolViolation";
    case ErrorCode::MessageTooBig: return "MessageTooBig";
    case ErrorCode::NotAnUpgrade: return "NotAnUpgrade";
    case ErrorCode::MalformedHttp: return "MalformedHttp";
    case ErrorCode::InvalidKey: return "InvalidKey";
    case ErrorCode::BadStatus: return "BadStatus";
    case ErrorCode::BadAccept: return "BadAccept";
    case ErrorCode::TruncatedEnvelope: return "TruncatedEnvelope";
    case ErrorCode::TrailingGarbage: return "TrailingGarbage";
    case ErrorCode::PortInUse: return "PortInUse";
    case ErrorCode::SpawnFailure: return "SpawnFailure";
    case ErrorCode::NoWorkerAvailable: return "NoWorkerAvailable";
    case ErrorCode::TargetUnreachable: return "TargetUnreachable";
    case ErrorCode::UnknownPreset: return "UnknownPreset";
    case ErrorCode::NoTransports: return "NoTransports";
    case ErrorCode::PermissionDenied: return "PermissionDenied";
    case ErrorCode::IoError: return "IoError";
    case ErrorCode::DivergesAtOne: return "DivergesAtOne";
    case ErrorCode::DegenerateInput: return "DegenerateInput";
    case ErrorCode::BadConfig: return "BadConfig";
  }
  return "Unknown";
}

/// Every failure raised by the library carries one of the codes above so
/// callers can branch on the kind without parsing messages.
class Error : public std::runtime_error {
 public:
  Error(ErrorCode code, const std::string &what)
      : std::runtime_error(std::string(to_string(code)) + ": " + what), code_(code) {}

  [[nodiscard]] ErrorCode code() const noexcept { return code_; }

 private:
  ErrorCode code_;
};

}  // namespace wsforge
