// SPDX-License-Identifier: Apache-2.0
#include <doctest.h>

#include <cmath>
#include <numeric>
#include <random>

#include "gradcheck.hpp"
#include "mhaseg/autodiff/attention.hpp"
#include "mhaseg/error.hpp"

using namespace mhaseg;
using namespace mhaseg::ad;
using testing_support::check_gradients;
using testing_support::random_tensor;

namespace {

AttentionWeights<double> random_weights(std::size_t d, std::mt19937_64& rng, bool grad = false) {
  return {random_tensor({d, d}, rng, -1, 1, grad), random_tensor({d, d}, rng, -1, 1, grad),
          random_tensor({d, d}, rng, -1, 1, grad), random_tensor({d, d}, rng, -1, 1, grad)};
}

Tensor<double> permute_rows(const Tensor<double>& x, const std::vector<std::size_t>& perm) {
  const std::size_t n = x.dim(0), d = x.dim(1);
  Tensor<double> out({n, d});
  for (std::size_t i = 0; i < n; ++i)
    for (std::size_t j = 0; j < d; ++j) out[i * d + j] = x[perm[i] * d + j];
  return out;
}

// Plain loops over the textbook definition.
std::vector<double> naive_attention(const Tensor<double>& q, const Tensor<double>& kv, const AttentionWeights<double>& w,
                                    std::size_t heads) {
  const std::size_t nq = q.dim(0), nk = kv.dim(0), d = q.dim(1), dk = d / heads;
  auto project = [d](const Tensor<double>& x, const Tensor<double>& m) {
    const std::size_t n = x.dim(0);
    std::vector<double> out(n * d, 0.0);
    for (std::size_t i = 0; i < n; ++i)
      for (std::size_t j = 0; j < d; ++j)
        for (std::size_t l = 0; l < d; ++l) out[i * d + j] += x[i * d + l] * m[l * d + j];
    return out;
  };
  const auto Q = project(q, w.query), K = project(kv, w.key), V = project(kv, w.value);
  std::vector<double> concat(nq * d, 0.0);
  for (std::size_t h = 0; h < heads; ++h)
    for (std::size_t i = 0; i < nq; ++i) {
      std::vector<double> s(nk);
      for (std::size_t j = 0; j < nk; ++j) {
        for (std::size_t l = 0; l < dk; ++l) s[j] += Q[i * d + h * dk + l] * K[j * d + h * dk + l];
        s[j] /= std::sqrt(static_cast<double>(dk));
      }
      const double mx = *std::max_element(s.begin(), s.end());
      double z = 0;
      for (auto& v : s) z += (v = std::exp(v - mx));
      for (std::size_t j = 0; j < nk; ++j)
        for (std::size_t l = 0; l < dk; ++l) concat[i * d + h * dk + l] += s[j] / z * V[j * d + h * dk + l];
    }
  std::vector<double> out(nq * d, 0.0);
  for (std::size_t i = 0; i < nq; ++i)
    for (std::size_t j = 0; j < d; ++j)
      for (std::size_t l = 0; l < d; ++l) out[i * d + j] += concat[i * d + l] * w.output[l * d + j];
  return out;
}

}  // namespace

TEST_SUITE("attention") {

TEST_CASE("matches a direct evaluation") {
  std::mt19937_64 rng(1);
  for (auto [nq, nk, d, h] : {std::array<std::size_t, 4>{3, 4, 8, 2}, {5, 1, 4, 4}, {7, 9, 12, 3}, {2, 2, 6, 1}}) {
    Tape<double> tape(false);
    const auto q = random_tensor({nq, d}, rng, -1, 1, false), kv = random_tensor({nk, d}, rng, -1, 1, false);
    const auto w = random_weights(d, rng);
    const auto got = multihead_attention(tape, q, kv, w, h);
    const auto ref = naive_attention(q, kv, w, h);
    REQUIRE(got.shape() == Shape{nq, d});
    for (std::size_t i = 0; i < ref.size(); ++i) CHECK(got[i] == doctest::Approx(ref[i]).epsilon(1e-12));
  }
}

TEST_CASE("attention rows are distributions and a lone key has weight one") {
  std::mt19937_64 rng(2);
  Tape<double> tape(false);
  AttentionTrace<double> trace;
  const auto q = random_tensor({6, 8}, rng, -3, 3, false), kv = random_tensor({5, 8}, rng, -3, 3, false);
  multihead_attention(tape, q, kv, random_weights(8, rng), 4, &trace);
  REQUIRE(trace.head_weights.size() == 4);
  for (const auto& a : trace.head_weights) {
    REQUIRE(a.shape() == Shape{6, 5});
    for (std::size_t i = 0; i < 6; ++i) {
      double row = 0;
      for (std::size_t j = 0; j < 5; ++j) {
        CHECK(a[i * 5 + j] >= 0.0);
        row += a[i * 5 + j];
      }
      CHECK(std::abs(row - 1.0) < 1e-6);
    }
  }

  AttentionTrace<double> lone;
  const auto w = random_weights(8, rng);
  const auto one = random_tensor({1, 8}, rng, -1, 1, false);
  const auto out = multihead_attention(tape, q, one, w, 2, &lone);
  for (const auto& a : lone.head_weights)
    for (double v : a.data()) CHECK(v == 1.0);
  // With one key every query receives the same value row, so every output row is equal.
  for (std::size_t i = 1; i < 6; ++i)
    for (std::size_t j = 0; j < 8; ++j) CHECK(out[i * 8 + j] == doctest::Approx(out[j]).epsilon(1e-12));
}

TEST_CASE("identical keys give uniform weights") {
  std::mt19937_64 rng(3);
  Tape<double> tape(false);
  Tensor<double> kv({4, 8});
  const auto row = random_tensor({1, 8}, rng, -1, 1, false);
  for (std::size_t i = 0; i < 4; ++i)
    for (std::size_t j = 0; j < 8; ++j) kv[i * 8 + j] = row[j];
  AttentionTrace<double> trace;
  multihead_attention(tape, random_tensor({3, 8}, rng, -1, 1, false), kv, random_weights(8, rng), 2, &trace);
  for (const auto& a : trace.head_weights)
    for (double v : a.data()) CHECK(v == doctest::Approx(0.25).epsilon(1e-12));
}

TEST_CASE("key/value permutation invariance and query permutation equivariance") {
  std::mt19937_64 rng(4);
  for (int trial = 0; trial < 20; ++trial) {
    Tape<double> tape(false);
    const std::size_t nq = 1 + rng() % 8, nk = 1 + rng() % 10, h = 1 + rng() % 4, d = h * (1 + rng() % 4);
    const auto q = random_tensor({nq, d}, rng, -2, 2, false), kv = random_tensor({nk, d}, rng, -2, 2, false);
    const auto w = random_weights(d, rng);
    const auto base = multihead_attention(tape, q, kv, w, h);

    std::vector<std::size_t> pk(nk), pq(nq);
    std::iota(pk.begin(), pk.end(), 0);
    std::iota(pq.begin(), pq.end(), 0);
    std::shuffle(pk.begin(), pk.end(), rng);
    std::shuffle(pq.begin(), pq.end(), rng);
    const auto shuffled_kv = multihead_attention(tape, q, permute_rows(kv, pk), w, h);
    for (std::size_t i = 0; i < base.size(); ++i) CHECK(std::abs(shuffled_kv[i] - base[i]) < 1e-6);

    const auto shuffled_q = multihead_attention(tape, permute_rows(q, pq), kv, w, h);
    const auto expect = permute_rows(base, pq);
    for (std::size_t i = 0; i < base.size(); ++i) CHECK(std::abs(shuffled_q[i] - expect[i]) < 1e-6);
  }
}

TEST_CASE("zero output projection gives a zero result") {
  std::mt19937_64 rng(5);
  Tape<double> tape(false);
  auto w = random_weights(8, rng);
  w.output = Tensor<double>({8, 8});
  const auto out = multihead_attention(tape, random_tensor({3, 8}, rng), random_tensor({4, 8}, rng), w, 2);
  for (double v : out.data()) CHECK(v == 0.0);
}

TEST_CASE("gradients for inputs and all projections") {
  std::mt19937_64 rng(6);
  for (auto [nq, nk, d, h] : {std::array<std::size_t, 4>{3, 4, 8, 2}, {2, 3, 4, 1}, {4, 2, 6, 3}}) {
    const auto g = check_gradients(
        [h](Tape<double>& t, const std::vector<Tensor<double>>& in) {
          return multihead_attention(t, in[0], in[1], AttentionWeights<double>{in[2], in[3], in[4], in[5]}, h);
        },
        {random_tensor({nq, d}, rng), random_tensor({nk, d}, rng), random_tensor({d, d}, rng),
         random_tensor({d, d}, rng), random_tensor({d, d}, rng), random_tensor({d, d}, rng)});
    INFO(g.worst);
    CHECK(g.max_rel_error < 1e-4);
  }
}

TEST_CASE("shape errors") {
  std::mt19937_64 rng(7);
  Tape<double> tape(false);
  const auto w = random_weights(8, rng);
  auto code = [&](auto f) {
    try {
      f();
    } catch (const Error& e) {
      return e.code();
    }
    return ErrorCode::IoFailure;
  };
  CHECK(code([&] { multihead_attention(tape, random_tensor({2, 8}, rng), random_tensor({2, 8}, rng), w, 3); }) ==
        ErrorCode::IndivisibleHeads);
  CHECK(code([&] { multihead_attention(tape, random_tensor({2, 8}, rng), random_tensor({2, 6}, rng), w, 2); }) ==
        ErrorCode::ShapeMismatch);
  CHECK(code([&] { multihead_attention(tape, random_tensor({2, 8}, rng), random_tensor({2, 8}, rng), w, 0); }) ==
        ErrorCode::IndivisibleHeads);
}

}
