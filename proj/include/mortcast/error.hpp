#ifndef MORTCAST_ERROR_HPP
#define MORTCAST_ERROR_HPP

#include <stdexcept>
#include <string>
#include <string_view>

namespace mortcast {

enum class ErrorCode {
  EmptyInput,
  MalformedLine,
  UnknownColumn,
  DuplicateCell,
  InconsistentRow,
  InvalidRate,
  NonFiniteLogit,
  MissingCell,
  OutOfRange,
  InvalidArgument,
  FactorizationFailed,
  NonFiniteValue,
  InfeasiblePlan,
  Io,
};

inline std::string_view to_string(ErrorCode code) {
  switch (code) {
    case ErrorCode::EmptyInput: return "EmptyInput";
    case ErrorCode::MalformedLine: return "MalformedLine";
    case ErrorCode::UnknownColumn: return "UnknownColumn";
    case ErrorCode::DuplicateCell: return "DuplicateCell";
    case ErrorCode::InconsistentRow: return "InconsistentRow";
    case ErrorCode::InvalidRate: return "InvalidRate";
    case ErrorCode::NonFiniteLogit: return "NonFiniteLogit";
    case ErrorCode::MissingCell: return "MissingCell";
    case ErrorCode::OutOfRange: return "OutOfRange";
    case ErrorCode::InvalidArgument: return "InvalidArgument";
    case ErrorCode::FactorizationFailed: return "FactorizationFailed";
    case ErrorCode::NonFiniteValue: return "NonFiniteValue";
    case ErrorCode::InfeasiblePlan: return "InfeasiblePlan";
    case ErrorCode::Io: return "Io";
  }
  return "Unknown";
}

/// Every failure raised by the library carries a machine-checkable code.
class Error : public std::runtime_error {
 public:
  Error(ErrorCode code, const std::string& message)
      : std::runtime_error(std::string(to_string(code)) + ": " + message), code_(code) {}

  ErrorCode code() const noexcept { return code_; }

 private:
  ErrorCode code_;
};

[[noreturn]] inline void fail(ErrorCode code, const std::string& message) {
  throw Error(code, message);
}

}  // namespace mortcast

#endif  // MORTCAST_ERROR_HPP
