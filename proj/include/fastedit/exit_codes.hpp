#pragma once

#include "fastedit/errors.hpp"

namespace fastedit {

// Process exit codes of the fastedit tool. Each error class has its own code.
enum ExitCode : int {
  kExitOk = 0,
  kExitGeneric = 1,
  kExitUsage = 2,
  kExitConfig = 3,
  kExitCapacity = 4,
  kExitSingular = 5,
  kExitCorruption = 6,
  kExitIncompatibleVersion = 7,
  kExitProvenance = 8,
  kExitIo = 9,
  kExitRejectedInput = 10,
  kExitOptimizationFailure = 11,
  kExitInfeasibleConstraint = 12,
  kExitData = 13,
  kExitInsufficientStream = 14,
};

inline int exit_code_for(ErrorKind kind) {
  switch (kind) {
    case ErrorKind::kRejectedInput: return kExitRejectedInput;
    case ErrorKind::kData: return kExitData;
    case ErrorKind::kSingularSystem: return kExitSingular;
    case ErrorKind::kInfeasibleConstraint: return kExitInfeasibleConstraint;
    case ErrorKind::kOptimizationFailure: return kExitOptimizationFailure;
    case ErrorKind::kInsufficientStream: return kExitInsufficientStream;
    case ErrorKind::kCorruption: return kExitCorruption;
    case ErrorKind::kIncompatibleVersion: return kExitIncompatibleVersion;
    case ErrorKind::kProvenance: return kExitProvenance;
    case ErrorKind::kCapacity: return kExitCapacity;
    case ErrorKind::kConfig: return kExitConfig;
    case ErrorKind::kIo: return kExitIo;
  }
  return kExitGeneric;
}

}  // namespace fastedit
