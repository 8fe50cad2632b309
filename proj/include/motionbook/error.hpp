#pragma once

#include <stdexcept>
#include <string>
#include <string_view>

namespace motionbook {

enum class ErrorKind {
  // usage
  kUsage,
  kInvalidConfig,
  kMissingPlaceholder,
  // data
  kIo,
  kBadMagic,
  kTruncatedFile,
  kUnsupportedVersion,
  kShapeMismatch,
  kDimensionMismatch,
  kWrongJointCount,
  kFormatMismatch,
  kUnsupportedFormat,
  kIndexOutOfRange,
  kTokenOutOfRange,
  kBadLength,
  kTooShort,
  kEmptyDataset,
  kEmptyManifest,
  kEmptyHistogram,
  kTooFewSamples,
  kBadBatchSize,
  kContextOverflow,
  kVocabMismatch,
  // numerical
  kNonFiniteValue,
  kNonFiniteLoss,
  kDegenerateRotation,
  kNotARotation,
  kIndefiniteCovariance,
};

enum class ErrorCategory { kUsage, kData, kNumerical };

std::string_view error_kind_name(ErrorKind kind);
ErrorCategory error_category(ErrorKind kind);

class Error : public std::runtime_error {
 public:
  Error(ErrorKind kind, const std::string& message)
      : std::runtime_error(message), kind_(kind) {}

  ErrorKind kind() const noexcept { return kind_; }
  ErrorCategory category() const noexcept { return error_category(kind_); }

 private:
  ErrorKind kind_;
};

[[noreturn]] inline void fail(ErrorKind kind, const std::string& message) {
  throw Error(kind, message);
}

inline void require(bool condition, ErrorKind kind, const std::string& message) {
  if (!condition) throw Error(kind, message);
}

}  // namespace motionbook
