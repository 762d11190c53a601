// SPDX-License-Identifier: Apache-2.0
#pragma once

#include <cstdint>
#include <span>
#include <vector>

#include "mhaseg/autodiff/tensor.hpp"

namespace mhaseg::ad {

struct AdamOptions {
  double learning_rate = 1e-3;
  double beta1 = 0.9;
  double beta2 = 0.999;
  double epsilon = 1e-8;
};

/// First/second moments per parameter, lazily zero-initialised on the first step.
template <typename T>
struct AdamState {
  AdamOptions options;
  std::uint64_t step = 0;
  std::vector<std::vector<T>> first_moment;
  std::vector<std::vector<T>> second_moment;
};

/// One bias-corrected Adam update of `params` using `grads` (aligned by index and shape).
template <typename T>
void adam_step(std::span<Tensor<T>> params, std::span<const std::span<const T>> grads, AdamState<T>& state);

/// Same, reading each parameter's own gradient buffer; a parameter without one counts as zero.
template <typename T>
void adam_step(std::span<Tensor<T>> params, AdamState<T>& state);

}  // namespace mhaseg::ad
