// SPDX-License-Identifier: Apache-2.0
#include "mhaseg/model.hpp"

#include <cmath>
#include <random>

#include "mhaseg/autodiff/ops.hpp"

namespace mhaseg::model {

void ModelConfig::validate() const {
  auto bad = [](const std::string& why) { fail(ErrorCode::BadConfig, why); };
  if (in_channels == 0) bad("in_channels must be positive");
  if (num_classes < 2) bad("num_classes must be at least 2");
  if (base_filters == 0) bad("base_filters must be positive");
  if (levels == 0 || levels > 8) bad("levels must lie in 1..8");
  if (kernel % 2 == 0) bad("kernel must be odd");
  if (heads == 0) bad("heads must be positive");
  if (attention_token_limit == 0) bad("attention_token_limit must be positive");
  if (attention_reduction == 0) bad("attention_reduction must be positive");
  const std::size_t stride = std::size_t{1} << levels;
  for (auto e : {input_extent.depth, input_extent.height, input_extent.width}) {
    if (e == 0 || e % stride != 0) {
      bad("input extent " + input_extent.str() + " not divisible by 2^levels = " + std::to_string(stride));
    }
  }
  for (std::size_t l = 0; l < levels; ++l) {
    if (fusion_width(l) % heads != 0) bad("fusion width not divisible by heads");
  }
}

std::size_t ModelConfig::filters(std::size_t level) const { return base_filters << level; }

std::size_t ModelConfig::fusion_width(std::size_t level) const {
  const std::size_t reduced = filters(level) / attention_reduction;
  return std::max(heads, reduced - reduced % heads);
}

Extent3 ModelConfig::extent_at(std::size_t level) const {
  return {input_extent.depth >> level, input_extent.height >> level, input_extent.width >> level};
}

std::size_t parameter_count(const ModelConfig& c) {
  const std::size_t k3 = c.kernel * c.kernel * c.kernel;
  const std::size_t affine = c.channel_affine ? 2 : 0;
  // conv with relu: weights + bias (+ gamma, beta)
  auto conv = [&](std::size_t in, std::size_t out) { return in * out * k3 + out + affine * out; };
  std::size_t total = 0;
  for (std::size_t l = 0; l < c.levels; ++l) {
    const std::size_t in = l == 0 ? c.in_channels : c.filters(l - 1);
    total += conv(in, c.filters(l)) + conv(c.filters(l), c.filters(l));
  }
  total += conv(c.filters(c.levels - 1), c.filters(c.levels)) + conv(c.filters(c.levels), c.filters(c.levels));
  for (std::size_t l = 0; l < c.levels; ++l) {
    const std::size_t f = c.filters(l);
    const std::size_t d = c.fusion_width(l);
    total += conv(c.filters(l + 1), f);     // upsampling conv
    total += 2 * (f * d + d);               // 1x1x1 reductions
    total += 4 * d * d;                     // W_Q, W_K, W_V, W_O
    total += conv(d, f);                    // refine
    total += conv(2 * f, f) + conv(f, f);   // post-concat block
  }
  total += c.filters(0) * c.num_classes + c.num_classes;  // head
  return total;
}

namespace {

template <typename T>
Tensor<T> he_normal(ad::Shape shape, std::size_t fan_in, std::mt19937_64& rng) {
  Tensor<T> t(std::move(shape));
  std::normal_distribution<double> dist(0.0, std::sqrt(2.0 / static_cast<double>(fan_in)));
  for (auto& v : t.data()) v = static_cast<T>(dist(rng));
  return t;
}

template <typename T>
Tensor<T> glorot_uniform(ad::Shape shape, std::size_t fan_in, std::size_t fan_out, std::mt19937_64& rng) {
  Tensor<T> t(std::move(shape));
  const double limit = std::sqrt(6.0 / static_cast<double>(fan_in + fan_out));
  std::uniform_real_distribution<double> dist(-limit, limit);
  for (auto& v : t.data()) v = static_cast<T>(dist(rng));
  return t;
}

}  // namespace

template <typename T>
UNet3DMHA<T> UNet3DMHA<T>::build(const ModelConfig& config, std::uint64_t seed) {
  config.validate();
  UNet3DMHA model(config);
  auto& reg = model.params_;
  std::mt19937_64 rng(seed);
  const std::size_t k = config.kernel;
  const std::size_t k3 = k * k * k;

  auto relu_conv = [&](const std::string& name, std::size_t in, std::size_t out) {
    reg.add(name + ".weight", he_normal<T>({out, in, k, k, k}, in * k3, rng));
    reg.add(name + ".bias", Tensor<T>(ad::Shape{out}));
    if (config.channel_affine) {
      reg.add(name + ".gamma", Tensor<T>::full(ad::Shape{out}, T{1}));
      reg.add(name + ".beta", Tensor<T>(ad::Shape{out}));
    }
  };
  auto pointwise = [&](const std::string& name, std::size_t in, std::size_t out) {
    reg.add(name + ".weight", glorot_uniform<T>({out, in, 1, 1, 1}, in, out, rng));
    reg.add(name + ".bias", Tensor<T>(ad::Shape{out}));
  };

  for (std::size_t l = 0; l < config.levels; ++l) {
    const std::string p = "enc" + std::to_string(l);
    const std::size_t in = l == 0 ? config.in_channels : config.filters(l - 1);
    relu_conv(p + ".conv1", in, config.filters(l));
    relu_conv(p + ".conv2", config.filters(l), config.filters(l));
  }
  relu_conv("bottleneck.conv1", config.filters(config.levels - 1), config.filters(config.levels));
  relu_conv("bottleneck.conv2", config.filters(config.levels), config.filters(config.levels));
  for (std::size_t i = config.levels; i-- > 0;) {
    const std::string p = "dec" + std::to_string(i);
    const std::size_t f = config.filters(i);
    const std::size_t d = config.fusion_width(i);
    relu_conv(p + ".up", config.filters(i + 1), f);
    pointwise(p + ".fusion.query_reduce", f, d);
    pointwise(p + ".fusion.key_reduce", f, d);
    for (const char* w : {"wq", "wk", "wv", "wo"}) {
      reg.add(p + ".fusion.attn." + w, glorot_uniform<T>({d, d}, d, d, rng));
    }
    relu_conv(p + ".fusion.refine", d, f);
    relu_conv(p + ".conv1", 2 * f, f);
    relu_conv(p + ".conv2", f, f);
  }
  pointwise("head", config.filters(0), config.num_classes);
  return model;
}

template <typename T>
Tensor<T> UNet3DMHA<T>::conv_relu(Tape<T>& tape, const Tensor<T>& x, const std::string& name) const {
  Tensor<T> y = ad::conv3d(tape, x, params_.at(name + ".weight"), params_.at(name + ".bias"));
  if (config_.channel_affine) y = ad::channel_affine(tape, y, params_.at(name + ".gamma"), params_.at(name + ".beta"));
  return ad::relu(tape, y);
}

template <typename T>
Tensor<T> UNet3DMHA<T>::conv_block(Tape<T>& tape, const Tensor<T>& x, const std::string& prefix) const {
  return conv_relu(tape, conv_relu(tape, x, prefix + ".conv1"), prefix + ".conv2");
}

template <typename T>
FusionParams<T> UNet3DMHA<T>::fusion_params(std::size_t level) const {
  const std::string p = "dec" + std::to_string(level) + ".fusion.";
  FusionParams<T> f;
  f.query_reduce_weight = params_.at(p + "query_reduce.weight");
  f.query_reduce_bias = params_.at(p + "query_reduce.bias");
  f.key_reduce_weight = params_.at(p + "key_reduce.weight");
  f.key_reduce_bias = params_.at(p + "key_reduce.bias");
  f.attention = {params_.at(p + "attn.wq"), params_.at(p + "attn.wk"), params_.at(p + "attn.wv"),
                 params_.at(p + "attn.wo")};
  f.refine_weight = params_.at(p + "refine.weight");
  f.refine_bias = params_.at(p + "refine.bias");
  return f;
}

template <typename T>
Tensor<T> mha_fusion(Tape<T>& tape, const Tensor<T>& decoder_feat, const Tensor<T>& skip_feat,
                     const FusionParams<T>& params, const ModelConfig& config, FusionTrace<T>* trace) {
  if (decoder_feat.rank() != 4 || skip_feat.rank() != 4 ||
      !std::equal(decoder_feat.shape().begin() + 1, decoder_feat.shape().end(), skip_feat.shape().begin() + 1)) {
    fail(ErrorCode::ShapeMismatch,
         "fusion inputs " + ad::shape_str(decoder_feat.shape()) + " and " + ad::shape_str(skip_feat.shape()));
  }
  Tensor<T> q = ad::conv3d(tape, decoder_feat, params.query_reduce_weight, params.query_reduce_bias);
  Tensor<T> kv = ad::conv3d(tape, skip_feat, params.key_reduce_weight, params.key_reduce_bias);
  Extent3 e{q.dim(1), q.dim(2), q.dim(3)};
  std::size_t pools = 0;
  while (e.voxels() > config.attention_token_limit) {
    if (e.depth % 2 || e.height % 2 || e.width % 2) {
      fail(ErrorCode::BadConfig, "cannot pool " + e.str() + " below the attention token limit");
    }
    q = ad::avgpool3d(tape, q);
    kv = ad::avgpool3d(tape, kv);
    e = {e.depth / 2, e.height / 2, e.width / 2};
    ++pools;
  }
  const auto attended =
      ad::multihead_attention(tape, ad::to_tokens(tape, q), ad::to_tokens(tape, kv), params.attention, config.heads,
                              trace ? &trace->attention : nullptr);
  Tensor<T> map = ad::from_tokens(tape, attended, e);
  for (std::size_t i = 0; i < pools; ++i) map = ad::upsample_nearest3d(tape, map);
  if (trace) {
    trace->token_count = e.voxels();
    trace->pool_steps = pools;
  }
  const Tensor<T> refined = ad::relu(tape, ad::conv3d(tape, map, params.refine_weight, params.refine_bias));
  return ad::add(tape, skip_feat, refined);
}

template <typename T>
Tensor<T> UNet3DMHA<T>::forward(Tape<T>& tape, const Tensor<T>& image, ForwardTrace<T>* trace) const {
  const auto& c = config_;
  if (image.rank() != 4 || image.dim(0) != c.in_channels || image.dim(1) != c.input_extent.depth ||
      image.dim(2) != c.input_extent.height || image.dim(3) != c.input_extent.width) {
    fail(ErrorCode::ShapeMismatch, "input " + ad::shape_str(image.shape()) + " but model expects " +
                                       std::to_string(c.in_channels) + "x" + c.input_extent.str());
  }
  auto shape_of = [](const Tensor<T>& t) { return LevelShape{t.dim(0), {t.dim(1), t.dim(2), t.dim(3)}}; };

  std::vector<Tensor<T>> skips;
  Tensor<T> x = image;
  for (std::size_t l = 0; l < c.levels; ++l) {
    x = conv_block(tape, x, "enc" + std::to_string(l));
    if (trace) trace->encoder.push_back(shape_of(x));
    skips.push_back(x);
    x = ad::maxpool3d(tape, x);
  }
  x = conv_block(tape, x, "bottleneck");
  if (trace) trace->bottleneck = shape_of(x);

  for (std::size_t l = c.levels; l-- > 0;) {
    const std::string p = "dec" + std::to_string(l);
    const Tensor<T> up = conv_relu(tape, ad::upsample_nearest3d(tape, x), p + ".up");
    FusionTrace<T>* ft = nullptr;
    if (trace) ft = &trace->fusions.emplace_back();
    const Tensor<T> fused = mha_fusion(tape, up, skips[l], fusion_params(l), c, ft);
    x = conv_block(tape, ad::concat_channels(tape, up, fused), p);
    if (trace) trace->decoder.push_back(shape_of(x));
  }
  const Tensor<T> logits = ad::conv3d(tape, x, params_.at("head.weight"), params_.at("head.bias"));
  return ad::softmax_channels(tape, logits);
}

template <typename T>
std::vector<ad::NamedArray> UNet3DMHA<T>::export_parameters() const {
  std::vector<ad::NamedArray> out;
  for (const auto& e : params_.entries()) {
    out.push_back({e.name, e.tensor.shape(), std::vector<float>(e.tensor.data().begin(), e.tensor.data().end())});
  }
  return out;
}

template <typename T>
void UNet3DMHA<T>::import_parameters(std::span<const ad::NamedArray> arrays) {
  if (arrays.size() != params_.size()) {
    fail(ErrorCode::ShapeMismatch, "checkpoint holds " + std::to_string(arrays.size()) + " arrays, model has " +
                                       std::to_string(params_.size()));
  }
  for (const auto& a : arrays) {
    if (!params_.contains(a.name)) fail(ErrorCode::ShapeMismatch, "checkpoint array " + a.name + " unknown to model");
    auto& t = params_.at(a.name);
    if (t.shape() != a.shape) fail(ErrorCode::ShapeMismatch, "checkpoint array " + a.name + " has wrong shape");
  }
  for (const auto& a : arrays) {
    auto dst = params_.at(a.name).data();
    std::transform(a.values.begin(), a.values.end(), dst.begin(), [](float v) { return static_cast<T>(v); });
  }
}

template <typename T>
LabelGrid predict_labels(const Tensor<T>& probs) {
  if (probs.rank() != 4) fail(ErrorCode::ShapeMismatch, "predict_labels expects K x D x H x W");
  const std::size_t K = probs.dim(0);
  LabelGrid out(Extent3{probs.dim(1), probs.dim(2), probs.dim(3)});
  const std::size_t S = out.extent.voxels();
  for (std::size_t s = 0; s < S; ++s) {
    std::size_t best = 0;
    for (std::size_t k = 1; k < K; ++k) {
      if (probs[k * S + s] > probs[best * S + s]) best = k;
    }
    out.values[s] = static_cast<std::uint8_t>(best);
  }
  return out;
}

template <typename T>
Tensor<T> to_tensor(const FloatGrid& grid) {
  std::vector<T> values(grid.values.begin(), grid.values.end());
  return Tensor<T>({grid.channels, grid.extent.depth, grid.extent.height, grid.extent.width}, std::move(values));
}

template class UNet3DMHA<float>;
template class UNet3DMHA<double>;
template Tensor<float> mha_fusion(Tape<float>&, const Tensor<float>&, const Tensor<float>&, const FusionParams<float>&,
                                  const ModelConfig&, FusionTrace<float>*);
template Tensor<double> mha_fusion(Tape<double>&, const Tensor<double>&, const Tensor<double>&,
                                   const FusionParams<double>&, const ModelConfig&, FusionTrace<double>*);
template LabelGrid predict_labels(const Tensor<float>&);
template LabelGrid predict_labels(const Tensor<double>&);
template Tensor<float> to_tensor<float>(const FloatGrid&);
template Tensor<double> to_tensor<double>(const FloatGrid&);

}  // namespace mhaseg::model
