#include "gasp/error.hpp"

namespace gasp {

std::string_view to_string(ErrorCode code) {
  switch (code) {
    case ErrorCode::kInvalidArgument: return "invalid argument";
    case ErrorCode::kInvariantViolation: return "invariant violation";
    case ErrorCode::kDegenerateGroup: return "degenerate group";
    case ErrorCode::kUnfitPolicy: return "unfit base policy";
    case ErrorCode::kInsufficientData: return "insufficient data";
    case ErrorCode::kOffDistribution: return "off-distribution target";
    case ErrorCode::kMazeTooConstrained: return "maze too constrained";
    case ErrorCode::kDegenerateProbeSet: return "degenerate probe set";
    case ErrorCode::kStageOneFailed: return "stage one failed";
    case ErrorCode::kIo: return "i/o error";
  }
  return "unknown error";
}

}  // namespace gasp
