// SPDX-License-Identifier: Apache-2.0
#include "mhaseg/autodiff/adam.hpp"

#include <cmath>
#include <string>

namespace mhaseg::ad {

template <typename T>
void adam_step(std::span<Tensor<T>> params, std::span<const std::span<const T>> grads, AdamState<T>& state) {
  if (grads.size() != params.size()) {
    fail(ErrorCode::ShapeMismatch, std::to_string(grads.size()) + " gradients for " + std::to_string(params.size()) + " parameters");
  }
  if (state.step == 0 && state.first_moment.empty()) {
    for (const auto& p : params) {
      state.first_moment.emplace_back(p.size(), T{});
      state.second_moment.emplace_back(p.size(), T{});
    }
  }
  if (state.first_moment.size() != params.size()) fail(ErrorCode::ShapeMismatch, "optimizer state built for other parameters");
  for (std::size_t i = 0; i < params.size(); ++i) {
    if (grads[i].size() != params[i].size() || state.first_moment[i].size() != params[i].size()) {
      fail(ErrorCode::ShapeMismatch, "gradient " + std::to_string(i) + " does not match its parameter");
    }
  }

  const AdamOptions& o = state.options;
  state.step += 1;
  const double t = static_cast<double>(state.step);
  const double correction1 = 1.0 - std::pow(o.beta1, t);
  const double correction2 = 1.0 - std::pow(o.beta2, t);
  for (std::size_t i = 0; i < params.size(); ++i) {
    auto theta = params[i].data();
    auto& m = state.first_moment[i];
    auto& v = state.second_moment[i];
    const auto g = grads[i];
    for (std::size_t j = 0; j < theta.size(); ++j) {
      const double gj = static_cast<double>(g[j]);
      const double mj = o.beta1 * static_cast<double>(m[j]) + (1.0 - o.beta1) * gj;
      const double vj = o.beta2 * static_cast<double>(v[j]) + (1.0 - o.beta2) * gj * gj;
      m[j] = static_cast<T>(mj);
      v[j] = static_cast<T>(vj);
      const double m_hat = mj / correction1;
      const double v_hat = vj / correction2;
      theta[j] = static_cast<T>(static_cast<double>(theta[j]) - o.learning_rate * m_hat / (std::sqrt(v_hat) + o.epsilon));
    }
  }
}

template <typename T>
void adam_step(std::span<Tensor<T>> params, AdamState<T>& state) {
  std::vector<std::vector<T>> zeros;
  std::vector<std::span<const T>> grads;
  grads.reserve(params.size());
  zeros.reserve(params.size());
  for (auto& p : params) {
    if (p.has_grad()) {
      grads.push_back(std::as_const(p).grad());
    } else {
      zeros.emplace_back(p.size(), T{});
      grads.push_back(zeros.back());
    }
  }
  adam_step(params, std::span<const std::span<const T>>(grads), state);
}

template void adam_step(std::span<Tensor<float>>, std::span<const std::span<const float>>, AdamState<float>&);
template void adam_step(std::span<Tensor<double>>, std::span<const std::span<const double>>, AdamState<double>&);
template void adam_step(std::span<Tensor<float>>, AdamState<float>&);
template void adam_step(std::span<Tensor<double>>, AdamState<double>&);

}  // namespace mhaseg::ad
