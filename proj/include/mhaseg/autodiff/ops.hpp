// SPDX-License-Identifier: Apache-2.0
#pragma once

#include <cstddef>
#include <vector>

#include "mhaseg/autodiff/tape.hpp"
#include "mhaseg/autodiff/tensor.hpp"
#include "mhaseg/grid.hpp"

// Differentiable primitives. Each op computes its forward result eagerly and, when the
// tape is recording and some input requires a gradient, records a rule that
// accumulates into the inputs' gradient buffers. Feature maps are C x D x H x W.

namespace mhaseg::ad {

/// Stride-1 "same" 3D convolution. weight: O x C x k x k x k (k odd), bias: O.
template <typename T>
Tensor<T> conv3d(Tape<T>& tape, const Tensor<T>& input, const Tensor<T>& weight, const Tensor<T>& bias);

/// max(x, 0); the derivative at exactly 0 is 0.
template <typename T>
Tensor<T> relu(Tape<T>& tape, const Tensor<T>& x);

/// 2x2x2 window, stride 2. Ties go to the lowest linear offset in the window.
template <typename T>
Tensor<T> maxpool3d(Tape<T>& tape, const Tensor<T>& x);

/// 2x2x2 mean, stride 2.
template <typename T>
Tensor<T> avgpool3d(Tape<T>& tape, const Tensor<T>& x);

/// Each voxel replicated into a 2x2x2 block.
template <typename T>
Tensor<T> upsample_nearest3d(Tape<T>& tape, const Tensor<T>& x);

template <typename T>
Tensor<T> concat_channels(Tape<T>& tape, const Tensor<T>& a, const Tensor<T>& b);

template <typename T>
Tensor<T> add(Tape<T>& tape, const Tensor<T>& a, const Tensor<T>& b);

template <typename T>
Tensor<T> scale(Tape<T>& tape, const Tensor<T>& x, T factor);

/// Rank-0 sum of all elements.
template <typename T>
Tensor<T> sum(Tape<T>& tape, const Tensor<T>& x);

/// y[c] = gamma[c] * x[c] + beta[c], per channel.
template <typename T>
Tensor<T> channel_affine(Tape<T>& tape, const Tensor<T>& x, const Tensor<T>& gamma, const Tensor<T>& beta);

/// Softmax over axis 0 at every spatial location of a K x ... tensor.
template <typename T>
Tensor<T> softmax_channels(Tape<T>& tape, const Tensor<T>& x);

/// C x D x H x W -> S x C with voxels flattened in row-major (z, y, x) order.
template <typename T>
Tensor<T> to_tokens(Tape<T>& tape, const Tensor<T>& x);

/// S x C -> C x D x H x W, the inverse of `to_tokens`.
template <typename T>
Tensor<T> from_tokens(Tape<T>& tape, const Tensor<T>& tokens, Extent3 extent);

inline constexpr double kProbabilityFloor = 1e-7;
inline constexpr double kDiceEpsilon = 1e-6;

/// -(1/N) * sum over locations of log(p[true class]), p clamped to [1e-7, 1].
template <typename T>
Tensor<T> categorical_cross_entropy(Tape<T>& tape, const Tensor<T>& probs, const Tensor<T>& target);

/// 1 - (1/K) * sum_k (2 sum p t + eps) / (sum p + sum t + eps).
template <typename T>
Tensor<T> dice_loss(Tape<T>& tape, const Tensor<T>& probs, const Tensor<T>& target, double eps = kDiceEpsilon);

/// K x D x H x W one-hot encoding of a label grid.
template <typename T>
Tensor<T> one_hot(const LabelGrid& labels, std::size_t num_classes);

/// Throws NotOneHot unless every location of `target` holds exactly one 1 and zeros elsewhere.
template <typename T>
void check_one_hot(const Tensor<T>& target);

}  // namespace mhaseg::ad
