// SPDX-License-Identifier: Apache-2.0
#pragma once

#include <cstddef>
#include <cstdint>
#include <span>
#include <string>
#include <vector>

#include "mhaseg/autodiff/attention.hpp"
#include "mhaseg/autodiff/checkpoint.hpp"
#include "mhaseg/autodiff/parameters.hpp"
#include "mhaseg/autodiff/tape.hpp"
#include "mhaseg/autodiff/tensor.hpp"
#include "mhaseg/grid.hpp"

namespace mhaseg::model {

using ad::Tape;
using ad::Tensor;

struct ModelConfig {
  std::size_t in_channels = 3;
  std::size_t num_classes = 4;
  std::size_t base_filters = 16;
  /// Number of pooling stages; the bottleneck sits at level `levels`.
  std::size_t levels = 4;
  std::size_t kernel = 3;
  std::size_t heads = 4;
  std::size_t attention_token_limit = 512;
  /// Fusion width is filters / attention_reduction, rounded down to a multiple of heads.
  std::size_t attention_reduction = 2;
  Extent3 input_extent{64, 64, 64};
  /// Per-channel learned scale and shift after every 3x3x3 convolution. Off by default.
  bool channel_affine = false;

  void validate() const;
  /// base_filters * 2^level for level in [0, levels].
  std::size_t filters(std::size_t level) const;
  /// d_model of the attention fusion at a decoder level.
  std::size_t fusion_width(std::size_t level) const;
  Extent3 extent_at(std::size_t level) const;

  bool operator==(const ModelConfig&) const = default;
};

/// Closed-form trainable scalar count for a configuration.
std::size_t parameter_count(const ModelConfig& config);

template <typename T>
struct FusionParams {
  Tensor<T> query_reduce_weight, query_reduce_bias;
  Tensor<T> key_reduce_weight, key_reduce_bias;
  ad::AttentionWeights<T> attention;
  Tensor<T> refine_weight, refine_bias;
};

struct LevelShape {
  std::size_t channels = 0;
  Extent3 extent;
  bool operator==(const LevelShape&) const = default;
};

template <typename T>
struct FusionTrace {
  ad::AttentionTrace<T> attention;
  std::size_t token_count = 0;
  std::size_t pool_steps = 0;
};

template <typename T>
struct ForwardTrace {
  std::vector<LevelShape> encoder;   // output of each encoder block, level 0 first
  LevelShape bottleneck;
  std::vector<LevelShape> decoder;   // output of each decoder block, deepest first
  std::vector<FusionTrace<T>> fusions;  // same order as `decoder`
};

/// Attention fusion of a decoder feature map with its same-level skip.
///
/// Both inputs are reduced to d_model channels by 1x1x1 convolutions, average-pooled
/// until at most `attention_token_limit` tokens remain, and attended with decoder tokens
/// as queries over skip tokens as keys/values. The result is upsampled back, refined by
/// relu(conv3d) to the skip's channel count and added onto `skip`.
template <typename T>
Tensor<T> mha_fusion(Tape<T>& tape, const Tensor<T>& decoder_feat, const Tensor<T>& skip_feat,
                     const FusionParams<T>& params, const ModelConfig& config, FusionTrace<T>* trace = nullptr);

template <typename T>
class UNet3DMHA {
 public:
  /// He-normal conv weights feeding ReLU, Glorot-uniform for the 1x1x1 reductions, the
  /// head and the attention projections, zero biases. Deterministic in `seed`.
  static UNet3DMHA build(const ModelConfig& config, std::uint64_t seed);

  const ModelConfig& config() const { return config_; }
  ad::ParameterRegistry<T>& parameters() { return params_; }
  const ad::ParameterRegistry<T>& parameters() const { return params_; }

  /// image: in_channels x D x H x W with (D, H, W) == input_extent. Returns softmax
  /// probabilities num_classes x D x H x W.
  Tensor<T> forward(Tape<T>& tape, const Tensor<T>& image, ForwardTrace<T>* trace = nullptr) const;

  FusionParams<T> fusion_params(std::size_t level) const;

  std::vector<ad::NamedArray> export_parameters() const;
  /// Names and shapes must match this model exactly.
  void import_parameters(std::span<const ad::NamedArray> arrays);

 private:
  explicit UNet3DMHA(const ModelConfig& config) : config_(config) {}

  Tensor<T> conv_block(Tape<T>& tape, const Tensor<T>& x, const std::string& prefix) const;
  Tensor<T> conv_relu(Tape<T>& tape, const Tensor<T>& x, const std::string& name) const;

  ModelConfig config_;
  ad::ParameterRegistry<T> params_;
};

/// Per-voxel argmax; ties resolve to the lowest class index.
template <typename T>
LabelGrid predict_labels(const Tensor<T>& probs);

/// Image grid (C x D x H x W) to a tensor.
template <typename T>
Tensor<T> to_tensor(const FloatGrid& grid);

}  // namespace mhaseg::model
