#pragma once

#include <stdexcept>
#include <string>
#include <string_view>

namespace gasp {

enum class ErrorCode {
  kInvalidArgument,
  kInvariantViolation,
  kDegenerateGroup,
  kUnfitPolicy,
  kInsufficientData,
  kOffDistribution,
  kMazeTooConstrained,
  kDegenerateProbeSet,
  kStageOneFailed,
  kIo,
};

std::string_view to_string(ErrorCode code);

class Error : public std::runtime_error {
 public:
  Error(ErrorCode code, const std::string& what)
      : std::runtime_error(what), code_(code) {}

  ErrorCode code() const noexcept { return code_; }

 private:
  ErrorCode code_;
};

[[noreturn]] inline void fail(ErrorCode code, const std::string& what) {
  throw Error(code, what);
}

inline void require(bool condition, const std::string& what,
                    ErrorCode code = ErrorCode::kInvalidArgument) {
  if (!condition) fail(code, what);
}

}  // namespace gasp
