#pragma once

#include <stdexcept>
#include <string>
#include <string_view>

namespace fastedit {

enum class ErrorKind {
  kRejectedInput,
  kData,
  kSingularSystem,
  kInfeasibleConstraint,
  kOptimizationFailure,
  kInsufficientStream,
  kCorruption,
  kIncompatibleVersion,
  kProvenance,
  kCapacity,
  kConfig,
  kIo,
};

inline std::string_view to_string(ErrorKind kind) {
  switch (kind) {
    case ErrorKind::kRejectedInput: return "rejected-input";
    case ErrorKind::kData: return "data";
    case ErrorKind::kSingularSystem: return "singular-system";
    case ErrorKind::kInfeasibleConstraint: return "infeasible-constraint";
    case ErrorKind::kOptimizationFailure: return "optimization-failure";
    case ErrorKind::kInsufficientStream: return "insufficient-stream";
    case ErrorKind::kCorruption: return "corruption";
    case ErrorKind::kIncompatibleVersion: return "incompatible-version";
    case ErrorKind::kProvenance: return "provenance";
    case ErrorKind::kCapacity: return "capacity";
    case ErrorKind::kConfig: return "config";
    case ErrorKind::kIo: return "io";
  }
  return "unknown";
}

/// Base of every error the library throws. The kind drives CLI exit codes.
class Error : public std::runtime_error {
 public:
  Error(ErrorKind kind, const std::string& message)
      : std::runtime_error(message), kind_(kind) {}

  ErrorKind kind() const noexcept { return kind_; }

 private:
  ErrorKind kind_;
};

[[noreturn]] inline void reject(const std::string& message) {
  throw Error(ErrorKind::kRejectedInput, message);
}

}  // namespace fastedit
