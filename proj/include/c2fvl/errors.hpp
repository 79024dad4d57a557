#pragma once

#include <stdexcept>
#include <string>

namespace c2fvl {

// Base for all library errors so callers can catch one type at the CLI edge.
struct Error : std::runtime_error {
  explicit Error(const std::string& msg) : std::runtime_error(msg) {}
};

struct ShapeMismatch : Error {
  explicit ShapeMismatch(const std::string& msg) : Error("ShapeMismatch: " + msg) {}
};

struct UnparseableReport : Error {
  explicit UnparseableReport(const std::string& msg) : Error("UnparseableReport: " + msg) {}
};

struct InconsistentReport : Error {
  explicit InconsistentReport(const std::string& msg) : Error("InconsistentReport: " + msg) {}
};

struct InvalidVector : Error {
  explicit InvalidVector(const std::string& msg) : Error("InvalidVector: " + msg) {}
};

struct ChannelsNotDivisibleBy8 : Error {
  explicit ChannelsNotDivisibleBy8(const std::string& msg)
      : Error("ChannelsNotDivisibleBy8: " + msg) {}
};

struct ReductionNotDividing : Error {
  explicit ReductionNotDividing(const std::string& msg) : Error("ReductionNotDividing: " + msg) {}
};

struct InfeasiblePlacement : Error {
  explicit InfeasiblePlacement(const std::string& msg) : Error("InfeasiblePlacement: " + msg) {}
};

struct IoError : Error {
  explicit IoError(const std::string& msg) : Error("IoError: " + msg) {}
};

struct CorruptIndex : Error {
  explicit CorruptIndex(const std::string& msg) : Error("CorruptIndex: " + msg) {}
};

struct NonFiniteLoss : Error {
  explicit NonFiniteLoss(const std::string& msg) : Error("NonFiniteLoss: " + msg) {}
};

struct DataShapeError : Error {
  explicit DataShapeError(const std::string& msg) : Error("DataShapeError: " + msg) {}
};

struct InvalidStage : Error {
  explicit InvalidStage(const std::string& msg) : Error("InvalidStage: " + msg) {}
};

struct ConfigError : Error {
  explicit ConfigError(const std::string& msg) : Error("ConfigError: " + msg) {}
};

}  // namespace c2fvl
