// SPDX-License-Identifier: Apache-2.0
#pragma once

#include <stdexcept>
#include <string>
#include <string_view>

namespace mhaseg {

/// Every failure the library reports falls into exactly one of these kinds.
enum class ErrorCode {
  // nifti-io
  BadMagic,
  UnsupportedDatatype,
  Truncated,
  BadDims,
  IoFailure,
  // preprocess
  NonFiniteInput,
  UnknownLabel,
  ShapeMismatch,
  TargetTooLarge,
  CorruptSample,
  // autodiff
  EvenKernel,
  OddExtent,
  IndivisibleHeads,
  NotOneHot,
  NotScalarRoot,
  // model / metrics / trainer
  BadConfig,
  EmptyGrid,
  BadLabel,
  TooFewSamples,
  NonFiniteLoss,
  MalformedInput,
};

std::string_view to_string(ErrorCode code);

class Error : public std::runtime_error {
 public:
  Error(ErrorCode code, const std::string& message);

  ErrorCode code() const noexcept { return code_; }

 private:
  ErrorCode code_;
};

[[noreturn]] void fail(ErrorCode code, const std::string& message);

}  // namespace mhaseg
