// SPDX-License-Identifier: Apache-2.0
#include <doctest.h>

#include <cmath>
#include <random>

#include "gradcheck.hpp"
#include "mhaseg/autodiff/ops.hpp"
#include "mhaseg/error.hpp"
#include "mhaseg/model.hpp"

using namespace mhaseg;
using namespace mhaseg::model;
using ad::Shape;
using testing_support::random_tensor;

namespace {

ModelConfig tiny(std::size_t extent = 8, std::size_t levels = 2) {
  ModelConfig c;
  c.base_filters = 4;
  c.levels = levels;
  c.heads = 2;
  c.attention_token_limit = 8;
  c.input_extent = {extent, extent, extent};
  return c;
}

ErrorCode code_of(auto&& f) {
  try {
    f();
  } catch (const Error& e) {
    return e.code();
  }
  return ErrorCode::IoFailure;
}

}  // namespace

TEST_SUITE("model") {

TEST_CASE("closed-form parameter count matches the built registry") {
  CHECK(parameter_count(ModelConfig{}) == 6810468);
  for (auto c : {ModelConfig{}, tiny(), tiny(16, 3)}) {
    for (bool affine : {false, true}) {
      c.channel_affine = affine;
      const auto m = UNet3DMHA<float>::build(c, 0);
      CHECK(m.parameters().scalar_count() == parameter_count(c));
    }
  }
}

TEST_CASE("fusion width follows the reduction rule") {
  ModelConfig c;
  CHECK(c.fusion_width(0) == 8);
  CHECK(c.fusion_width(3) == 64);
  c.attention_reduction = 3;
  CHECK(c.fusion_width(0) == 4);  // 16 / 3 = 5, down to a multiple of 4
  c.attention_reduction = 16;
  CHECK(c.fusion_width(0) == 4);  // never below one slot per head
}

TEST_CASE("forward shapes telescope and probabilities sum to one") {
  const auto c = tiny(16, 3);
  const auto m = UNet3DMHA<float>::build(c, 3);
  std::mt19937_64 rng(1);
  ad::Tensor<float> x({3, 16, 16, 16});
  std::uniform_real_distribution<float> u(0, 1);
  for (auto& v : x.data()) v = u(rng);
  ad::Tape<float> tape(false);
  ForwardTrace<float> trace;
  const auto p = m.forward(tape, x, &trace);
  CHECK(p.shape() == Shape{4, 16, 16, 16});
  REQUIRE(trace.encoder.size() == 3);
  for (std::size_t l = 0; l < 3; ++l) CHECK(trace.encoder[l] == LevelShape{4u << l, c.extent_at(l)});
  CHECK(trace.bottleneck == LevelShape{32, {2, 2, 2}});
  REQUIRE(trace.decoder.size() == 3);
  for (std::size_t i = 0; i < 3; ++i) CHECK(trace.decoder[i] == trace.encoder[2 - i]);
  for (const auto& f : trace.fusions) CHECK(f.token_count <= c.attention_token_limit);
  CHECK(trace.fusions.back().pool_steps == 3);  // 16^3 down to 2^3
  for (std::size_t s = 0; s < 16 * 16 * 16; ++s) {
    double total = 0;
    for (std::size_t k = 0; k < 4; ++k) total += p[k * 4096 + s];
    CHECK(std::abs(total - 1.0) < 1e-5);
  }
  CHECK(code_of([&] { m.forward(tape, ad::Tensor<float>({3, 8, 8, 8})); }) == ErrorCode::ShapeMismatch);
}

TEST_CASE("builds and forwards are deterministic in the seed") {
  const auto c = tiny();
  const auto a = UNet3DMHA<float>::build(c, 42), b = UNet3DMHA<float>::build(c, 42), d = UNet3DMHA<float>::build(c, 43);
  CHECK(a.export_parameters() == b.export_parameters());
  CHECK(a.export_parameters() != d.export_parameters());
  ad::Tensor<float> x = ad::Tensor<float>::full({3, 8, 8, 8}, 0.3F);
  for (std::size_t i = 0; i < x.size(); i += 7) x[i] = 0.9F;
  ad::Tape<float> t1(false), t2(false);
  const auto pa = a.forward(t1, x), pb = b.forward(t2, x);
  CHECK(std::equal(pa.data().begin(), pa.data().end(), pb.data().begin()));
  for (const auto& e : a.parameters().entries())
    if (e.name.ends_with(".bias")) {
      for (float v : e.tensor.data()) CHECK(v == 0.0F);
    }
}

TEST_CASE("zeroed output projection reduces the fusion to its skip input") {
  std::mt19937_64 rng(2);
  auto m = UNet3DMHA<double>::build(tiny(), 5);
  auto p = m.fusion_params(1);
  std::fill(p.attention.output.data().begin(), p.attention.output.data().end(), 0.0);
  const auto dec = random_tensor({8, 4, 4, 4}, rng), skip = random_tensor({8, 4, 4, 4}, rng);
  ad::Tape<double> tape(false);
  const auto fused = mha_fusion(tape, dec, skip, p, m.config());
  CHECK(std::equal(fused.data().begin(), fused.data().end(), skip.data().begin()));

  // The untouched fusion genuinely depends on the decoder input.
  auto q = m.fusion_params(0);
  const auto d0 = random_tensor({4, 8, 8, 8}, rng), s0 = random_tensor({4, 8, 8, 8}, rng);
  const auto f0 = mha_fusion(tape, d0, s0, q, m.config());
  auto d1 = d0.clone();
  for (auto& v : d1.data()) v = -v;
  const auto f1 = mha_fusion(tape, d1, s0, q, m.config());
  CHECK(!std::equal(f0.data().begin(), f0.data().end(), f1.data().begin()));
}

TEST_CASE("fusion gradients") {
  std::mt19937_64 rng(3);
  auto cfg = tiny();
  cfg.attention_token_limit = 8;
  const auto m = UNet3DMHA<double>::build(cfg, 6);
  const auto base = m.fusion_params(0);  // 4 filters, width 2, 8^3 pooled to 2^3
  const auto g = testing_support::check_gradients(
      [&](ad::Tape<double>& t, const std::vector<ad::Tensor<double>>& in) {
        FusionParams<double> p = base;
        p.query_reduce_weight = in[2];
        p.key_reduce_weight = in[3];
        p.attention.query = in[4];
        p.attention.output = in[5];
        p.refine_weight = in[6];
        p.refine_bias = in[7];
        return mha_fusion(t, in[0], in[1], p, cfg);
      },
      {random_tensor({4, 4, 4, 4}, rng), random_tensor({4, 4, 4, 4}, rng),
       random_tensor(base.query_reduce_weight.shape(), rng), random_tensor(base.key_reduce_weight.shape(), rng),
       random_tensor(base.attention.query.shape(), rng), random_tensor(base.attention.output.shape(), rng),
       random_tensor(base.refine_weight.shape(), rng), random_tensor(base.refine_bias.shape(), rng, 0.5, 1.0)},
      1, 1e-5, 40);
  INFO(g.worst);
  CHECK(g.max_rel_error < 1e-4);
}

TEST_CASE("whole-model gradient on a tiny configuration") {
  auto cfg = tiny(4, 1);
  cfg.base_filters = 2;
  cfg.heads = 1;
  auto m = UNet3DMHA<double>::build(cfg, 7);
  std::mt19937_64 rng(4);
  // Every parameter is an input to the check; the image is fixed.
  const auto image = random_tensor({3, 4, 4, 4}, rng, 0, 1, false);
  std::vector<ad::Tensor<double>> inputs;
  std::vector<std::string> names;
  for (auto& e : m.parameters().entries()) {
    auto t = e.tensor.clone();
    if (e.name.ends_with(".bias")) {
      for (auto& v : t.data()) v = 0.05 + 0.01 * static_cast<double>(rng() % 10);
    }
    inputs.push_back(t);
    names.push_back(e.name);
  }
  const auto g = testing_support::check_gradients(
      [&](ad::Tape<double>& t, const std::vector<ad::Tensor<double>>& in) {
        for (std::size_t i = 0; i < in.size(); ++i) m.parameters().at(names[i]) = in[i];
        return m.forward(t, image);
      },
      inputs, 2, 1e-6, 12);
  INFO(g.worst);
  CHECK(g.max_rel_error < 1e-3);
}

TEST_CASE("parameter export and import") {
  const auto c = tiny();
  const auto a = UNet3DMHA<float>::build(c, 1);
  auto b = UNet3DMHA<float>::build(c, 2);
  b.import_parameters(a.export_parameters());
  CHECK(b.export_parameters() == a.export_parameters());
  auto arrays = a.export_parameters();
  arrays.pop_back();
  CHECK(code_of([&] { b.import_parameters(arrays); }) == ErrorCode::ShapeMismatch);
  arrays = a.export_parameters();
  arrays[0].shape[0] += 1;
  CHECK(code_of([&] { b.import_parameters(arrays); }) == ErrorCode::ShapeMismatch);
  arrays = a.export_parameters();
  arrays[0].name = "nope";
  CHECK(code_of([&] { b.import_parameters(arrays); }) == ErrorCode::ShapeMismatch);
}

TEST_CASE("config validation") {
  auto bad = [](auto mutate) {
    auto c = tiny();
    mutate(c);
    return code_of([&] { c.validate(); });
  };
  CHECK(bad([](ModelConfig& c) { c.kernel = 2; }) == ErrorCode::BadConfig);
  CHECK(bad([](ModelConfig& c) { c.input_extent = {8, 8, 6}; }) == ErrorCode::BadConfig);
  CHECK(bad([](ModelConfig& c) { c.heads = 0; }) == ErrorCode::BadConfig);
  CHECK(bad([](ModelConfig& c) { c.num_classes = 1; }) == ErrorCode::BadConfig);
  CHECK(bad([](ModelConfig& c) { c.levels = 0; }) == ErrorCode::BadConfig);
  CHECK_NOTHROW(tiny().validate());
}

TEST_CASE("argmax labels break ties toward the lower class") {
  ad::Tensor<float> p({4, 1, 1, 3}, {0.25F, 0.1F, 0.0F, 0.25F, 0.7F, 0.0F, 0.25F, 0.1F, 0.5F, 0.25F, 0.1F, 0.5F});
  const auto l = predict_labels(p);
  CHECK(l.extent == Extent3{1, 1, 3});
  CHECK(l.values == std::vector<std::uint8_t>{0, 1, 2});
}

}
