// SPDX-License-Identifier: Apache-2.0
#include "mhaseg/autodiff/attention.hpp"

#include <Eigen/Core>

#include <cmath>
#include <string>

namespace mhaseg::ad {
namespace {

template <typename T>
using RowMat = Eigen::Matrix<T, Eigen::Dynamic, Eigen::Dynamic, Eigen::RowMajor>;
template <typename T>
using Map = Eigen::Map<RowMat<T>>;
template <typename T>
using ConstMap = Eigen::Map<const RowMat<T>>;

template <typename T>
ConstMap<T> view(const Tensor<T>& t) {
  return ConstMap<T>(t.data().data(), static_cast<Eigen::Index>(t.dim(0)), static_cast<Eigen::Index>(t.dim(1)));
}

template <typename T>
Map<T> grad_view(Tensor<T>& t) {
  return Map<T>(t.grad().data(), static_cast<Eigen::Index>(t.dim(0)), static_cast<Eigen::Index>(t.dim(1)));
}

template <typename T>
void row_softmax(RowMat<T>& m) {
  for (Eigen::Index r = 0; r < m.rows(); ++r) {
    auto row = m.row(r);
    const T mx = row.maxCoeff();
    row = (row.array() - mx).exp();
    row /= row.sum();
  }
}

}  // namespace

template <typename T>
Tensor<T> multihead_attention(Tape<T>& tape, const Tensor<T>& queries, const Tensor<T>& keys_values,
                              const AttentionWeights<T>& weights, std::size_t heads, AttentionTrace<T>* trace) {
  if (queries.rank() != 2 || keys_values.rank() != 2 || queries.dim(1) != keys_values.dim(1)) {
    fail(ErrorCode::ShapeMismatch,
         "attention tokens " + shape_str(queries.shape()) + " and " + shape_str(keys_values.shape()));
  }
  const std::size_t d = queries.dim(1);
  if (heads == 0 || d % heads != 0) {
    fail(ErrorCode::IndivisibleHeads, "d_model " + std::to_string(d) + " not divisible by " + std::to_string(heads) + " heads");
  }
  for (const auto* w : {&weights.query, &weights.key, &weights.value, &weights.output}) {
    if (w->shape() != Shape{d, d}) {
      fail(ErrorCode::ShapeMismatch, "projection " + shape_str(w->shape()) + " for d_model " + std::to_string(d));
    }
  }
  if (keys_values.dim(0) == 0 || queries.dim(0) == 0) fail(ErrorCode::ShapeMismatch, "empty token set");

  const auto nq = static_cast<Eigen::Index>(queries.dim(0));
  const auto dk = static_cast<Eigen::Index>(d / heads);
  const T inv_sqrt = T{1} / std::sqrt(static_cast<T>(dk));

  const auto Xq = view(queries);
  const auto Xkv = view(keys_values);
  RowMat<T> Q = Xq * view(weights.query);
  RowMat<T> K = Xkv * view(weights.key);
  RowMat<T> V = Xkv * view(weights.value);
  RowMat<T> H(nq, static_cast<Eigen::Index>(d));
  std::vector<RowMat<T>> probs(heads);
  for (std::size_t h = 0; h < heads; ++h) {
    const auto col = static_cast<Eigen::Index>(h) * dk;
    probs[h] = (Q.middleCols(col, dk) * K.middleCols(col, dk).transpose()) * inv_sqrt;
    row_softmax(probs[h]);
    H.middleCols(col, dk).noalias() = probs[h] * V.middleCols(col, dk);
  }
  Tensor<T> out({queries.dim(0), d});
  Map<T>(out.data().data(), nq, static_cast<Eigen::Index>(d)).noalias() = H * view(weights.output);

  if (trace) {
    trace->head_weights.clear();
    for (const auto& p : probs) {
      Tensor<T> w({static_cast<std::size_t>(p.rows()), static_cast<std::size_t>(p.cols())});
      Map<T>(w.data().data(), p.rows(), p.cols()) = p;
      trace->head_weights.push_back(std::move(w));
    }
  }

  if (tape.tracks(queries, keys_values, weights.query, weights.key, weights.value, weights.output)) {
    out.set_requires_grad(true);
    tape.record("multihead_attention", out,
                [=, xq = queries, xkv = keys_values, wq = weights.query, wk = weights.key, wv = weights.value,
                 wo = weights.output, Q = std::move(Q), K = std::move(K), V = std::move(V), H = std::move(H),
                 probs = std::move(probs)]() mutable {
                  const auto dy = std::as_const(out).grad();
                  const ConstMap<T> G(dy.data(), nq, static_cast<Eigen::Index>(d));
                  if (wo.requires_grad()) grad_view(wo).noalias() += H.transpose() * G;
                  const RowMat<T> dH = G * view(wo).transpose();
                  RowMat<T> dQ(Q.rows(), Q.cols());
                  RowMat<T> dK(K.rows(), K.cols());
                  RowMat<T> dV(V.rows(), V.cols());
                  for (std::size_t h = 0; h < heads; ++h) {
                    const auto col = static_cast<Eigen::Index>(h) * dk;
                    const auto& P = probs[h];
                    const auto dA = dH.middleCols(col, dk);
                    const RowMat<T> dP = dA * V.middleCols(col, dk).transpose();
                    dV.middleCols(col, dk).noalias() = P.transpose() * dA;
                    // Row-wise softmax Jacobian.
                    RowMat<T> dS = P.cwiseProduct(dP);
                    const Eigen::Matrix<T, Eigen::Dynamic, 1> row_dot = dS.rowwise().sum();
                    dS -= P.cwiseProduct(row_dot.replicate(1, P.cols()));
                    dS *= inv_sqrt;
                    dQ.middleCols(col, dk).noalias() = dS * K.middleCols(col, dk);
                    dK.middleCols(col, dk).noalias() = dS.transpose() * Q.middleCols(col, dk);
                  }
                  if (wq.requires_grad()) grad_view(wq).noalias() += view(xq).transpose() * dQ;
                  if (wk.requires_grad()) grad_view(wk).noalias() += view(xkv).transpose() * dK;
                  if (wv.requires_grad()) grad_view(wv).noalias() += view(xkv).transpose() * dV;
                  if (xq.requires_grad()) grad_view(xq).noalias() += dQ * view(wq).transpose();
                  if (xkv.requires_grad()) {
                    auto g = grad_view(xkv);
                    g.noalias() += dK * view(wk).transpose();
                    g.noalias() += dV * view(wv).transpose();
                  }
                });
  }
  return out;
}

template Tensor<float> multihead_attention(Tape<float>&, const Tensor<float>&, const Tensor<float>&,
                                           const AttentionWeights<float>&, std::size_t, AttentionTrace<float>*);
template Tensor<double> multihead_attention(Tape<double>&, const Tensor<double>&, const Tensor<double>&,
                                            const AttentionWeights<double>&, std::size_t, AttentionTrace<double>*);

}  // namespace mhaseg::ad
