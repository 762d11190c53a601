// SPDX-License-Identifier: Apache-2.0
#include "mhaseg/error.hpp"

namespace mhaseg {

std::string_view to_string(ErrorCode code) {
  switch (code) {
    case ErrorCode::BadMagic: return "BadMagic";
    case ErrorCode::UnsupportedDatatype: return "UnsupportedDatatype";
    case ErrorCode::Truncated: return "Truncated";
    case ErrorCode::BadDims: return "BadDims";
    case ErrorCode::IoFailure: return "IoFailure";
    case ErrorCode::NonFiniteInput: return "NonFiniteInput";
    case ErrorCode::UnknownLabel: return "UnknownLabel";
    case ErrorCode::ShapeMismatch: return "ShapeMismatch";
    case ErrorCode::TargetTooLarge: return "TargetTooLarge";
    case ErrorCode::CorruptSample: return "CorruptSample";
    case ErrorCode::EvenKernel: return "EvenKernel";
    case ErrorCode::OddExtent: return "OddExtent";
    case ErrorCode::IndivisibleHeads: return "IndivisibleHeads";
    case ErrorCode::NotOneHot: return "NotOneHot";
    case ErrorCode::NotScalarRoot: return "NotScalarRoot";
    case ErrorCode::BadConfig: return "BadConfig";
    case ErrorCode::EmptyGrid: return "EmptyGrid";
    case ErrorCode::BadLabel: return "BadLabel";
    case ErrorCode::TooFewSamples: return "TooFewSamples";
    case ErrorCode::NonFiniteLoss: return "NonFiniteLoss";
    case ErrorCode::MalformedInput: return "MalformedInput";
  }
  return "Unknown";
}

Error::Error(ErrorCode code, const std::string& message)
    : std::runtime_error(std::string(to_string(code)) + ": " + message), code_(code) {}

void fail(ErrorCode code, const std::string& message) { throw Error(code, message); }

}  // namespace mhaseg
