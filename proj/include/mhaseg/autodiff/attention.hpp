// SPDX-License-Identifier: Apache-2.0
#pragma once

#include <cstddef>
#include <vector>

#include "mhaseg/autodiff/tape.hpp"
#include "mhaseg/autodiff/tensor.hpp"

namespace mhaseg::ad {

/// Projection weights, each d_model x d_model. Head i owns columns [i*d_k, (i+1)*d_k)
/// of the query, key and value projections; the output projection mixes all heads.
template <typename T>
struct AttentionWeights {
  Tensor<T> query;
  Tensor<T> key;
  Tensor<T> value;
  Tensor<T> output;
};

/// Post-softmax attention matrices (N_q x N_kv), one per head, copied out of a forward pass.
template <typename T>
struct AttentionTrace {
  std::vector<Tensor<T>> head_weights;
};

/// Scaled dot-product multi-head attention over token matrices (rows are tokens).
///
/// queries: N_q x d_model; keys_values: N_kv x d_model. For every head,
/// A = rowsoftmax(Q K^T / sqrt(d_k)) V; heads are concatenated and projected by W_O.
/// No positional encoding is applied.
template <typename T>
Tensor<T> multihead_attention(Tape<T>& tape, const Tensor<T>& queries, const Tensor<T>& keys_values,
                              const AttentionWeights<T>& weights, std::size_t heads,
                              AttentionTrace<T>* trace = nullptr);

}  // namespace mhaseg::ad
