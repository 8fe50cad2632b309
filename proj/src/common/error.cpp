#include "motionbook/error.hpp"

namespace motionbook {

std::string_view error_kind_name(ErrorKind kind) {
  switch (kind) {
    case ErrorKind::kUsage: return "Usage";
    case ErrorKind::kInvalidConfig: return "InvalidConfig";
    case ErrorKind::kMissingPlaceholder: return "MissingPlaceholder";
    case ErrorKind::kIo: return "IoError";
    case ErrorKind::kBadMagic: return "BadMagic";
    case ErrorKind::kTruncatedFile: return "TruncatedFile";
    case ErrorKind::kUnsupportedVersion: return "UnsupportedVersion";
    case ErrorKind::kShapeMismatch: return "ShapeMismatch";
    case ErrorKind::kDimensionMismatch: return "DimensionMismatch";
    case ErrorKind::kWrongJointCount: return "WrongJointCount";
    case ErrorKind::kFormatMismatch: return "FormatMismatch";
    case ErrorKind::kUnsupportedFormat: return "UnsupportedFormat";
    case ErrorKind::kIndexOutOfRange: return "IndexOutOfRange";
    case ErrorKind::kTokenOutOfRange: return "TokenOutOfRange";
    case ErrorKind::kBadLength: return "BadLength";
    case ErrorKind::kTooShort: return "TooShort";
    case ErrorKind::kEmptyDataset: return "EmptyDataset";
    case ErrorKind::kEmptyManifest: return "EmptyManifest";
    case ErrorKind::kEmptyHistogram: return "EmptyHistogram";
    case ErrorKind::kTooFewSamples: return "TooFewSamples";
    case ErrorKind::kBadBatchSize: return "BadBatchSize";
    case ErrorKind::kContextOverflow: return "ContextOverflow";
    case ErrorKind::kVocabMismatch: return "VocabMismatch";
    case ErrorKind::kNonFiniteValue: return "NonFiniteValue";
    case ErrorKind::kNonFiniteLoss: return "NonFiniteLoss";
    case ErrorKind::kDegenerateRotation: return "DegenerateRotation";
    case ErrorKind::kNotARotation: return "NotARotation";
    case ErrorKind::kIndefiniteCovariance: return "IndefiniteCovariance";
  }
  return "Unknown";
}

ErrorCategory error_category(ErrorKind kind) {
  switch (kind) {
    case ErrorKind::kUsage:
    case ErrorKind::kInvalidConfig:
    case ErrorKind::kMissingPlaceholder:
      return ErrorCategory::kUsage;
    case ErrorKind::kNonFiniteValue:
    case ErrorKind::kNonFiniteLoss:
    case ErrorKind::kDegenerateRotation:
    case ErrorKind::kNotARotation:
    case ErrorKind::kIndefiniteCovariance:
      return ErrorCategory::kNumerical;
    default:
      return ErrorCategory::kData;
  }
}

}  // namespace motionbook
