// SPDX-License-Identifier: Apache-2.0
#include "mhaseg/autodiff/ops.hpp"

#include <Eigen/Core>

#include <algorithm>
#include <cmath>
#include <limits>
#include <string>

namespace mhaseg::ad {
namespace {

template <typename T>
using RowMat = Eigen::Matrix<T, Eigen::Dynamic, Eigen::Dynamic, Eigen::RowMajor>;
template <typename T>
using MatMap = Eigen::Map<RowMat<T>, 0, Eigen::OuterStride<>>;
template <typename T>
using ConstMatMap = Eigen::Map<const RowMat<T>, 0, Eigen::OuterStride<>>;

struct Geometry {
  std::size_t channels, depth, height, width;
  std::size_t voxels() const { return depth * height * width; }
};

template <typename T>
Geometry feature_geometry(const Tensor<T>& x, const char* op) {
  if (x.rank() != 4) {
    fail(ErrorCode::ShapeMismatch, std::string(op) + " expects C x D x H x W, got " + shape_str(x.shape()));
  }
  return {x.dim(0), x.dim(1), x.dim(2), x.dim(3)};
}

template <typename T>
void accumulate(Tensor<T>& target, std::span<const T> delta) {
  auto g = target.grad();
  for (std::size_t i = 0; i < g.size(); ++i) g[i] += delta[i];
}

// Rows of the column matrix enumerate (c, dz, dy, dx); columns enumerate output voxels of
// planes [z0, z0 + planes). Out-of-range taps read as zero.
template <typename T>
void im2col(const T* in, const Geometry& g, std::size_t k, std::size_t z0, std::size_t planes, T* cols) {
  const auto pad = static_cast<std::ptrdiff_t>(k / 2);
  const auto H = static_cast<std::ptrdiff_t>(g.height);
  const auto W = static_cast<std::ptrdiff_t>(g.width);
  const std::size_t plane = g.height * g.width;
  const std::size_t ncols = planes * plane;
  std::size_t row = 0;
  for (std::size_t c = 0; c < g.channels; ++c) {
    const T* src_c = in + c * g.voxels();
    for (std::size_t dz = 0; dz < k; ++dz) {
      for (std::size_t dy = 0; dy < k; ++dy) {
        const std::ptrdiff_t oy = static_cast<std::ptrdiff_t>(dy) - pad;
        const std::ptrdiff_t y_lo = std::clamp<std::ptrdiff_t>(-oy, 0, H);
        const std::ptrdiff_t y_hi = std::clamp<std::ptrdiff_t>(H - oy, 0, H);
        for (std::size_t dx = 0; dx < k; ++dx, ++row) {
          const std::ptrdiff_t ox = static_cast<std::ptrdiff_t>(dx) - pad;
          const std::ptrdiff_t x_lo = std::clamp<std::ptrdiff_t>(-ox, 0, W);
          const std::ptrdiff_t x_hi = std::clamp<std::ptrdiff_t>(W - ox, 0, W);
          T* dst_row = cols + row * ncols;
          for (std::size_t zz = 0; zz < planes; ++zz) {
            T* dst = dst_row + zz * plane;
            const auto iz = static_cast<std::ptrdiff_t>(z0 + zz + dz) - pad;
            if (iz < 0 || iz >= static_cast<std::ptrdiff_t>(g.depth) || y_lo >= y_hi || x_lo >= x_hi) {
              std::fill(dst, dst + plane, T{});
              continue;
            }
            // A (y, x) shift is a constant offset in the flattened plane: copy the valid rows in
            // one run, then clear the columns that wrapped across a row boundary.
            const T* src = src_c + static_cast<std::size_t>(iz) * plane;
            std::fill(dst, dst + y_lo * W, T{});
            std::copy(src + (y_lo + oy) * W + ox + x_lo, src + (y_hi - 1 + oy) * W + ox + x_hi, dst + y_lo * W + x_lo);
            std::fill(dst + y_hi * W, dst + plane, T{});
            if (x_lo > 0 || x_hi < W) {
              for (std::ptrdiff_t y = y_lo; y < y_hi; ++y) {
                T* r = dst + y * W;
                std::fill(r, r + x_lo, T{});
                std::fill(r + x_hi, r + W, T{});
              }
            }
          }
        }
      }
    }
  }
}

// Column-matrix element budget per chunk (about 16 MB of float32).
constexpr std::size_t kColumnBudget = std::size_t{1} << 22;

std::size_t planes_per_chunk(std::size_t rows, const Geometry& g) {
  const std::size_t per_plane = rows * g.height * g.width;
  return std::clamp<std::size_t>(kColumnBudget / std::max<std::size_t>(per_plane, 1), 1, g.depth);
}

// out (O x S) = W (O x C*k^3) applied to `in` as a same-padded correlation.
template <typename T>
void correlate(const T* in, const Geometry& g, const T* weight, std::size_t out_ch, std::size_t k, T* out) {
  const std::size_t rows = g.channels * k * k * k;
  const std::size_t S = g.voxels();
  const std::size_t plane = g.height * g.width;
  const ConstMatMap<T> W(weight, static_cast<Eigen::Index>(out_ch), static_cast<Eigen::Index>(rows),
                         Eigen::OuterStride<>(static_cast<Eigen::Index>(rows)));
  MatMap<T> Y(out, static_cast<Eigen::Index>(out_ch), static_cast<Eigen::Index>(S),
              Eigen::OuterStride<>(static_cast<Eigen::Index>(S)));
  if (k == 1) {
    const ConstMatMap<T> X(in, static_cast<Eigen::Index>(g.channels), static_cast<Eigen::Index>(S),
                           Eigen::OuterStride<>(static_cast<Eigen::Index>(S)));
    Y.noalias() = W * X;
    return;
  }
  const std::size_t chunk = planes_per_chunk(rows, g);
  std::vector<T> cols;
  for (std::size_t z0 = 0; z0 < g.depth; z0 += chunk) {
    const std::size_t planes = std::min(chunk, g.depth - z0);
    const auto n = static_cast<Eigen::Index>(planes * plane);
    cols.resize(rows * planes * plane);
    im2col(in, g, k, z0, planes, cols.data());
    const ConstMatMap<T> C(cols.data(), static_cast<Eigen::Index>(rows), n, Eigen::OuterStride<>(n));
    Y.middleCols(static_cast<Eigen::Index>(z0 * plane), n).noalias() = W * C;
  }
}

}  // namespace

template <typename T>
Tensor<T> conv3d(Tape<T>& tape, const Tensor<T>& input, const Tensor<T>& weight, const Tensor<T>& bias) {
  const Geometry g = feature_geometry(input, "conv3d");
  if (weight.rank() != 5 || weight.dim(1) != g.channels || weight.dim(2) != weight.dim(3) ||
      weight.dim(2) != weight.dim(4)) {
    fail(ErrorCode::ShapeMismatch,
         "conv3d weight " + shape_str(weight.shape()) + " incompatible with input " + shape_str(input.shape()));
  }
  const std::size_t k = weight.dim(2);
  if (k % 2 == 0) fail(ErrorCode::EvenKernel, "conv3d kernel extent " + std::to_string(k) + " is even");
  const std::size_t out_ch = weight.dim(0);
  if (bias.rank() != 1 || bias.dim(0) != out_ch) {
    fail(ErrorCode::ShapeMismatch, "conv3d bias " + shape_str(bias.shape()) + " for " + std::to_string(out_ch) + " outputs");
  }
  const std::size_t k3 = k * k * k;
  const std::size_t rows = g.channels * k3;
  const std::size_t S = g.voxels();
  const std::size_t plane = g.height * g.width;
  const bool tracked = tape.tracks(input, weight, bias);

  Tensor<T> out({out_ch, g.depth, g.height, g.width});
  correlate(input.data().data(), g, weight.data().data(), out_ch, k, out.data().data());
  for (std::size_t o = 0; o < out_ch; ++o) {
    T* row = out.data().data() + o * S;
    const T b = bias[o];
    for (std::size_t i = 0; i < S; ++i) row[i] += b;
  }
  if (!tracked) return out;

  out.set_requires_grad(true);
  tape.record("conv3d", out, [=, input = input, weight = weight, bias = bias]() mutable {
    const auto dy = std::as_const(out).grad();
    const ConstMatMap<T> dY(dy.data(), static_cast<Eigen::Index>(out_ch), static_cast<Eigen::Index>(S),
                            Eigen::OuterStride<>(static_cast<Eigen::Index>(S)));
    if (bias.requires_grad()) {
      auto db = bias.grad();
      for (std::size_t o = 0; o < out_ch; ++o) {
        T acc{};
        const T* r = dy.data() + o * S;
        for (std::size_t i = 0; i < S; ++i) acc += r[i];
        db[o] += acc;
      }
    }
    if (weight.requires_grad()) {
      MatMap<T> dW(weight.grad().data(), static_cast<Eigen::Index>(out_ch), static_cast<Eigen::Index>(rows),
                   Eigen::OuterStride<>(static_cast<Eigen::Index>(rows)));
      if (k == 1) {
        const ConstMatMap<T> X(input.data().data(), static_cast<Eigen::Index>(g.channels),
                               static_cast<Eigen::Index>(S), Eigen::OuterStride<>(static_cast<Eigen::Index>(S)));
        dW.noalias() += dY * X.transpose();
      } else {
        const std::size_t chunk = planes_per_chunk(rows, g);
        std::vector<T> cols;
        for (std::size_t z0 = 0; z0 < g.depth; z0 += chunk) {
          const std::size_t planes = std::min(chunk, g.depth - z0);
          const auto n = static_cast<Eigen::Index>(planes * plane);
          cols.resize(rows * planes * plane);
          im2col(input.data().data(), g, k, z0, planes, cols.data());
          const ConstMatMap<T> C(cols.data(), static_cast<Eigen::Index>(rows), n, Eigen::OuterStride<>(n));
          dW.noalias() += dY.middleCols(static_cast<Eigen::Index>(z0 * plane), n) * C.transpose();
        }
      }
    }
    if (input.requires_grad()) {
      // Input gradient: correlate dY with the spatially flipped, channel-transposed kernel.
      std::vector<T> flipped(g.channels * out_ch * k3);
      const auto w = weight.data();
      for (std::size_t o = 0; o < out_ch; ++o)
        for (std::size_t ci = 0; ci < g.channels; ++ci)
          for (std::size_t t = 0; t < k3; ++t)
            flipped[(ci * out_ch + o) * k3 + (k3 - 1 - t)] = w[(o * g.channels + ci) * k3 + t];
      std::vector<T> dx(g.channels * S);
      const Geometry gy{out_ch, g.depth, g.height, g.width};
      correlate<T>(dy.data(), gy, flipped.data(), g.channels, k, dx.data());
      accumulate(input, std::span<const T>(dx));
    }
  });
  return out;
}

template <typename T>
Tensor<T> relu(Tape<T>& tape, const Tensor<T>& x) {
  Tensor<T> out(x.shape());
  auto xs = x.data();
  auto ys = out.data();
  for (std::size_t i = 0; i < xs.size(); ++i) ys[i] = xs[i] > T{0} ? xs[i] : T{0};
  if (tape.tracks(x)) {
    out.set_requires_grad(true);
    tape.record("relu", out, [=, x = x]() mutable {
      const auto dy = std::as_const(out).grad();
      auto dx = x.grad();
      const auto xv = x.data();
      for (std::size_t i = 0; i < dx.size(); ++i) {
        if (xv[i] > T{0}) dx[i] += dy[i];
      }
    });
  }
  return out;
}

template <typename T>
Tensor<T> maxpool3d(Tape<T>& tape, const Tensor<T>& x) {
  const Geometry g = feature_geometry(x, "maxpool3d");
  if (g.depth % 2 || g.height % 2 || g.width % 2) {
    fail(ErrorCode::OddExtent, "maxpool3d needs even extents, got " + shape_str(x.shape()));
  }
  const std::size_t D = g.depth / 2, H = g.height / 2, W = g.width / 2;
  Tensor<T> out({g.channels, D, H, W});
  std::vector<std::uint32_t> argmax(out.size());
  const auto xs = x.data();
  auto ys = out.data();
  std::size_t o = 0;
  for (std::size_t c = 0; c < g.channels; ++c) {
    for (std::size_t z = 0; z < D; ++z) {
      for (std::size_t y = 0; y < H; ++y) {
        for (std::size_t xx = 0; xx < W; ++xx, ++o) {
          std::size_t best = ((c * g.depth + 2 * z) * g.height + 2 * y) * g.width + 2 * xx;
          T best_v = xs[best];
          // Window visited in increasing linear offset; strict > keeps the first maximum.
          for (std::size_t dz = 0; dz < 2; ++dz) {
            for (std::size_t dy = 0; dy < 2; ++dy) {
              for (std::size_t dx = 0; dx < 2; ++dx) {
                const std::size_t idx = ((c * g.depth + 2 * z + dz) * g.height + 2 * y + dy) * g.width + 2 * xx + dx;
                if (xs[idx] > best_v) {
                  best_v = xs[idx];
                  best = idx;
                }
              }
            }
          }
          ys[o] = best_v;
          argmax[o] = static_cast<std::uint32_t>(best);
        }
      }
    }
  }
  if (tape.tracks(x)) {
    out.set_requires_grad(true);
    tape.record("maxpool3d", out, [=, x = x, argmax = std::move(argmax)]() mutable {
      const auto dy = std::as_const(out).grad();
      auto dx = x.grad();
      for (std::size_t i = 0; i < dy.size(); ++i) dx[argmax[i]] += dy[i];
    });
  }
  return out;
}

template <typename T>
Tensor<T> avgpool3d(Tape<T>& tape, const Tensor<T>& x) {
  const Geometry g = feature_geometry(x, "avgpool3d");
  if (g.depth % 2 || g.height % 2 || g.width % 2) {
    fail(ErrorCode::OddExtent, "avgpool3d needs even extents, got " + shape_str(x.shape()));
  }
  const std::size_t D = g.depth / 2, H = g.height / 2, W = g.width / 2;
  Tensor<T> out({g.channels, D, H, W});
  const auto xs = x.data();
  auto ys = out.data();
  const T eighth = T{1} / T{8};
  std::size_t o = 0;
  for (std::size_t c = 0; c < g.channels; ++c)
    for (std::size_t z = 0; z < D; ++z)
      for (std::size_t y = 0; y < H; ++y)
        for (std::size_t xx = 0; xx < W; ++xx, ++o) {
          T acc{};
          for (std::size_t dz = 0; dz < 2; ++dz)
            for (std::size_t dy = 0; dy < 2; ++dy)
              for (std::size_t dx = 0; dx < 2; ++dx)
                acc += xs[((c * g.depth + 2 * z + dz) * g.height + 2 * y + dy) * g.width + 2 * xx + dx];
          ys[o] = acc * eighth;
        }
  if (tape.tracks(x)) {
    out.set_requires_grad(true);
    tape.record("avgpool3d", out, [=, x = x]() mutable {
      const auto dy = std::as_const(out).grad();
      auto dx = x.grad();
      std::size_t i = 0;
      for (std::size_t c = 0; c < g.channels; ++c)
        for (std::size_t z = 0; z < D; ++z)
          for (std::size_t y = 0; y < H; ++y)
            for (std::size_t xx = 0; xx < W; ++xx, ++i) {
              const T share = dy[i] * eighth;
              for (std::size_t dz = 0; dz < 2; ++dz)
                for (std::size_t ddy = 0; ddy < 2; ++ddy)
                  for (std::size_t ddx = 0; ddx < 2; ++ddx)
                    dx[((c * g.depth + 2 * z + dz) * g.height + 2 * y + ddy) * g.width + 2 * xx + ddx] += share;
            }
    });
  }
  return out;
}

template <typename T>
Tensor<T> upsample_nearest3d(Tape<T>& tape, const Tensor<T>& x) {
  const Geometry g = feature_geometry(x, "upsample_nearest3d");
  const std::size_t D = 2 * g.depth, H = 2 * g.height, W = 2 * g.width;
  Tensor<T> out({g.channels, D, H, W});
  const auto xs = x.data();
  auto ys = out.data();
  std::size_t o = 0;
  for (std::size_t c = 0; c < g.channels; ++c)
    for (std::size_t z = 0; z < D; ++z)
      for (std::size_t y = 0; y < H; ++y) {
        const T* src = xs.data() + ((c * g.depth + z / 2) * g.height + y / 2) * g.width;
        for (std::size_t xx = 0; xx < W; ++xx, ++o) ys[o] = src[xx / 2];
      }
  if (tape.tracks(x)) {
    out.set_requires_grad(true);
    tape.record("upsample_nearest3d", out, [=, x = x]() mutable {
      const auto dy = std::as_const(out).grad();
      auto dx = x.grad();
      std::size_t i = 0;
      for (std::size_t c = 0; c < g.channels; ++c)
        for (std::size_t z = 0; z < D; ++z)
          for (std::size_t y = 0; y < H; ++y) {
            T* dst = dx.data() + ((c * g.depth + z / 2) * g.height + y / 2) * g.width;
            for (std::size_t xx = 0; xx < W; ++xx, ++i) dst[xx / 2] += dy[i];
          }
    });
  }
  return out;
}

template <typename T>
Tensor<T> concat_channels(Tape<T>& tape, const Tensor<T>& a, const Tensor<T>& b) {
  if (a.rank() < 1 || a.rank() != b.rank() || !std::equal(a.shape().begin() + 1, a.shape().end(), b.shape().begin() + 1)) {
    fail(ErrorCode::ShapeMismatch, "concat_channels " + shape_str(a.shape()) + " with " + shape_str(b.shape()));
  }
  Shape shape = a.shape();
  shape[0] += b.dim(0);
  Tensor<T> out(shape);
  std::copy(a.data().begin(), a.data().end(), out.data().begin());
  std::copy(b.data().begin(), b.data().end(), out.data().begin() + static_cast<std::ptrdiff_t>(a.size()));
  if (tape.tracks(a, b)) {
    out.set_requires_grad(true);
    tape.record("concat_channels", out, [=, a = a, b = b]() mutable {
      const auto dy = std::as_const(out).grad();
      if (a.requires_grad()) accumulate(a, dy.subspan(0, a.size()));
      if (b.requires_grad()) accumulate(b, dy.subspan(a.size(), b.size()));
    });
  }
  return out;
}

template <typename T>
Tensor<T> add(Tape<T>& tape, const Tensor<T>& a, const Tensor<T>& b) {
  if (a.shape() != b.shape()) fail(ErrorCode::ShapeMismatch, "add " + shape_str(a.shape()) + " + " + shape_str(b.shape()));
  Tensor<T> out(a.shape());
  auto ys = out.data();
  for (std::size_t i = 0; i < ys.size(); ++i) ys[i] = a[i] + b[i];
  if (tape.tracks(a, b)) {
    out.set_requires_grad(true);
    tape.record("add", out, [=, a = a, b = b]() mutable {
      const auto dy = std::as_const(out).grad();
      if (a.requires_grad()) accumulate(a, dy);
      if (b.requires_grad()) accumulate(b, dy);
    });
  }
  return out;
}

template <typename T>
Tensor<T> scale(Tape<T>& tape, const Tensor<T>& x, T factor) {
  Tensor<T> out(x.shape());
  auto ys = out.data();
  for (std::size_t i = 0; i < ys.size(); ++i) ys[i] = factor * x[i];
  if (tape.tracks(x)) {
    out.set_requires_grad(true);
    tape.record("scale", out, [=, x = x]() mutable {
      const auto dy = std::as_const(out).grad();
      auto dx = x.grad();
      for (std::size_t i = 0; i < dx.size(); ++i) dx[i] += factor * dy[i];
    });
  }
  return out;
}

template <typename T>
Tensor<T> sum(Tape<T>& tape, const Tensor<T>& x) {
  Tensor<T> out(Shape{});
  T acc{};
  for (T v : x.data()) acc += v;
  out[0] = acc;
  if (tape.tracks(x)) {
    out.set_requires_grad(true);
    tape.record("sum", out, [=, x = x]() mutable {
      const T dy = std::as_const(out).grad()[0];
      for (auto& d : x.grad()) d += dy;
    });
  }
  return out;
}

template <typename T>
Tensor<T> channel_affine(Tape<T>& tape, const Tensor<T>& x, const Tensor<T>& gamma, const Tensor<T>& beta) {
  if (x.rank() < 1 || gamma.shape() != Shape{x.dim(0)} || beta.shape() != Shape{x.dim(0)}) {
    fail(ErrorCode::ShapeMismatch, "channel_affine parameters for " + shape_str(x.shape()));
  }
  const std::size_t C = x.dim(0);
  const std::size_t S = x.size() / std::max<std::size_t>(C, 1);
  Tensor<T> out(x.shape());
  for (std::size_t c = 0; c < C; ++c)
    for (std::size_t i = 0; i < S; ++i) out[c * S + i] = gamma[c] * x[c * S + i] + beta[c];
  if (tape.tracks(x, gamma, beta)) {
    out.set_requires_grad(true);
    tape.record("channel_affine", out, [=, x = x, gamma = gamma, beta = beta]() mutable {
      const auto dy = std::as_const(out).grad();
      for (std::size_t c = 0; c < C; ++c) {
        T dg{}, db{};
        for (std::size_t i = 0; i < S; ++i) {
          dg += dy[c * S + i] * x[c * S + i];
          db += dy[c * S + i];
        }
        if (gamma.requires_grad()) gamma.grad()[c] += dg;
        if (beta.requires_grad()) beta.grad()[c] += db;
        if (x.requires_grad()) {
          auto dx = x.grad();
          for (std::size_t i = 0; i < S; ++i) dx[c * S + i] += gamma[c] * dy[c * S + i];
        }
      }
    });
  }
  return out;
}

template <typename T>
Tensor<T> softmax_channels(Tape<T>& tape, const Tensor<T>& x) {
  if (x.rank() < 1 || x.dim(0) == 0) fail(ErrorCode::ShapeMismatch, "softmax over empty channel axis");
  const std::size_t K = x.dim(0);
  const std::size_t S = x.size() / K;
  Tensor<T> out(x.shape());
  for (T v : x.data()) {
    if (!std::isfinite(v)) fail(ErrorCode::NonFiniteInput, "softmax logits contain NaN or Inf");
  }
  for (std::size_t s = 0; s < S; ++s) {
    T m = x[s];
    for (std::size_t k = 1; k < K; ++k) m = std::max(m, x[k * S + s]);
    T z{};
    for (std::size_t k = 0; k < K; ++k) {
      const T e = std::exp(x[k * S + s] - m);
      out[k * S + s] = e;
      z += e;
    }
    for (std::size_t k = 0; k < K; ++k) out[k * S + s] /= z;
  }
  if (tape.tracks(x)) {
    out.set_requires_grad(true);
    tape.record("softmax_channels", out, [=, x = x]() mutable {
      const auto dy = std::as_const(out).grad();
      auto dx = x.grad();
      for (std::size_t s = 0; s < S; ++s) {
        T dot{};
        for (std::size_t k = 0; k < K; ++k) dot += dy[k * S + s] * out[k * S + s];
        for (std::size_t k = 0; k < K; ++k) dx[k * S + s] += out[k * S + s] * (dy[k * S + s] - dot);
      }
    });
  }
  return out;
}

template <typename T>
Tensor<T> to_tokens(Tape<T>& tape, const Tensor<T>& x) {
  const Geometry g = feature_geometry(x, "to_tokens");
  const std::size_t S = g.voxels(), C = g.channels;
  Tensor<T> out({S, C});
  for (std::size_t c = 0; c < C; ++c)
    for (std::size_t s = 0; s < S; ++s) out[s * C + c] = x[c * S + s];
  if (tape.tracks(x)) {
    out.set_requires_grad(true);
    tape.record("to_tokens", out, [=, x = x]() mutable {
      const auto dy = std::as_const(out).grad();
      auto dx = x.grad();
      for (std::size_t c = 0; c < C; ++c)
        for (std::size_t s = 0; s < S; ++s) dx[c * S + s] += dy[s * C + c];
    });
  }
  return out;
}

template <typename T>
Tensor<T> from_tokens(Tape<T>& tape, const Tensor<T>& tokens, Extent3 extent) {
  if (tokens.rank() != 2 || tokens.dim(0) != extent.voxels()) {
    fail(ErrorCode::ShapeMismatch, "from_tokens " + shape_str(tokens.shape()) + " into " + extent.str());
  }
  const std::size_t S = tokens.dim(0), C = tokens.dim(1);
  Tensor<T> out({C, extent.depth, extent.height, extent.width});
  for (std::size_t c = 0; c < C; ++c)
    for (std::size_t s = 0; s < S; ++s) out[c * S + s] = tokens[s * C + c];
  if (tape.tracks(tokens)) {
    out.set_requires_grad(true);
    tape.record("from_tokens", out, [=, tokens = tokens]() mutable {
      const auto dy = std::as_const(out).grad();
      auto dt = tokens.grad();
      for (std::size_t c = 0; c < C; ++c)
        for (std::size_t s = 0; s < S; ++s) dt[s * C + c] += dy[c * S + s];
    });
  }
  return out;
}

template <typename T>
void check_one_hot(const Tensor<T>& target) {
  if (target.rank() < 1 || target.dim(0) == 0) fail(ErrorCode::NotOneHot, "target has no class axis");
  const std::size_t K = target.dim(0);
  const std::size_t S = target.size() / K;
  for (std::size_t s = 0; s < S; ++s) {
    int ones = 0;
    for (std::size_t k = 0; k < K; ++k) {
      const T v = target[k * S + s];
      if (v == T{1}) {
        ++ones;
      } else if (v != T{0}) {
        fail(ErrorCode::NotOneHot, "target value " + std::to_string(static_cast<double>(v)) + " is not 0 or 1");
      }
    }
    if (ones != 1) fail(ErrorCode::NotOneHot, "location " + std::to_string(s) + " has " + std::to_string(ones) + " hot classes");
  }
}

template <typename T>
Tensor<T> categorical_cross_entropy(Tape<T>& tape, const Tensor<T>& probs, const Tensor<T>& target) {
  if (probs.shape() != target.shape()) {
    fail(ErrorCode::ShapeMismatch, "cross entropy " + shape_str(probs.shape()) + " vs " + shape_str(target.shape()));
  }
  check_one_hot(target);
  const std::size_t K = probs.dim(0);
  const std::size_t S = probs.size() / K;
  const T floor = static_cast<T>(kProbabilityFloor);
  std::vector<std::uint32_t> truth(S);
  double acc = 0.0;
  for (std::size_t s = 0; s < S; ++s) {
    std::size_t k = 0;
    while (target[k * S + s] != T{1}) ++k;
    truth[s] = static_cast<std::uint32_t>(k);
    const T p = std::clamp(probs[k * S + s], floor, T{1});
    acc -= std::log(static_cast<double>(p));
  }
  Tensor<T> out(Shape{});
  out[0] = static_cast<T>(acc / static_cast<double>(S));
  if (tape.tracks(probs)) {
    out.set_requires_grad(true);
    tape.record("categorical_cross_entropy", out, [=, probs = probs, truth = std::move(truth)]() mutable {
      const T dy = std::as_const(out).grad()[0];
      auto dp = probs.grad();
      const T inv_n = T{1} / static_cast<T>(S);
      for (std::size_t s = 0; s < S; ++s) {
        const std::size_t i = truth[s] * S + s;
        const T p = probs[i];
        // Clamped region is flat.
        if (p > floor && p <= T{1}) dp[i] -= dy * inv_n / p;
      }
    });
  }
  return out;
}

template <typename T>
Tensor<T> dice_loss(Tape<T>& tape, const Tensor<T>& probs, const Tensor<T>& target, double eps) {
  if (probs.shape() != target.shape()) {
    fail(ErrorCode::ShapeMismatch, "dice loss " + shape_str(probs.shape()) + " vs " + shape_str(target.shape()));
  }
  check_one_hot(target);
  const std::size_t K = probs.dim(0);
  const std::size_t S = probs.size() / K;
  std::vector<double> inter(K, 0.0), denom(K, 0.0);
  for (std::size_t k = 0; k < K; ++k) {
    for (std::size_t s = 0; s < S; ++s) {
      const double p = probs[k * S + s];
      const double t = target[k * S + s];
      inter[k] += p * t;
      denom[k] += p + t;
    }
  }
  double mean_dice = 0.0;
  for (std::size_t k = 0; k < K; ++k) mean_dice += (2.0 * inter[k] + eps) / (denom[k] + eps);
  mean_dice /= static_cast<double>(K);
  Tensor<T> out(Shape{});
  out[0] = static_cast<T>(1.0 - mean_dice);
  if (tape.tracks(probs)) {
    out.set_requires_grad(true);
    tape.record("dice_loss", out, [=, probs = probs, inter = std::move(inter), denom = std::move(denom)]() mutable {
      const double dy = static_cast<double>(std::as_const(out).grad()[0]);
      auto dp = probs.grad();
      for (std::size_t k = 0; k < K; ++k) {
        const double d = denom[k] + eps;
        const double num = 2.0 * inter[k] + eps;
        for (std::size_t s = 0; s < S; ++s) {
          const double t = target[k * S + s];
          const double dd = (2.0 * t * d - num) / (d * d);
          dp[k * S + s] += static_cast<T>(-dy * dd / static_cast<double>(K));
        }
      }
    });
  }
  return out;
}

template <typename T>
Tensor<T> one_hot(const LabelGrid& labels, std::size_t num_classes) {
  const std::size_t S = labels.extent.voxels();
  Tensor<T> out({num_classes, labels.extent.depth, labels.extent.height, labels.extent.width});
  for (std::size_t s = 0; s < S; ++s) {
    const std::size_t k = labels.values[s];
    if (k >= num_classes) fail(ErrorCode::BadLabel, "label " + std::to_string(k) + " outside class range");
    out[k * S + s] = T{1};
  }
  return out;
}

#define MHASEG_INSTANTIATE_OPS(T)                                                                       \
  template Tensor<T> conv3d(Tape<T>&, const Tensor<T>&, const Tensor<T>&, const Tensor<T>&);           \
  template Tensor<T> relu(Tape<T>&, const Tensor<T>&);                                                 \
  template Tensor<T> maxpool3d(Tape<T>&, const Tensor<T>&);                                            \
  template Tensor<T> avgpool3d(Tape<T>&, const Tensor<T>&);                                            \
  template Tensor<T> upsample_nearest3d(Tape<T>&, const Tensor<T>&);                                   \
  template Tensor<T> concat_channels(Tape<T>&, const Tensor<T>&, const Tensor<T>&);                    \
  template Tensor<T> add(Tape<T>&, const Tensor<T>&, const Tensor<T>&);                                \
  template Tensor<T> scale(Tape<T>&, const Tensor<T>&, T);                                             \
  template Tensor<T> sum(Tape<T>&, const Tensor<T>&);                                                  \
  template Tensor<T> channel_affine(Tape<T>&, const Tensor<T>&, const Tensor<T>&, const Tensor<T>&);   \
  template Tensor<T> softmax_channels(Tape<T>&, const Tensor<T>&);                                     \
  template Tensor<T> to_tokens(Tape<T>&, const Tensor<T>&);                                            \
  template Tensor<T> from_tokens(Tape<T>&, const Tensor<T>&, Extent3);                                 \
  template Tensor<T> categorical_cross_entropy(Tape<T>&, const Tensor<T>&, const Tensor<T>&);          \
  template Tensor<T> dice_loss(Tape<T>&, const Tensor<T>&, const Tensor<T>&, double);                  \
  template Tensor<T> one_hot<T>(const LabelGrid&, std::size_t);                                        \
  template void check_one_hot(const Tensor<T>&);

MHASEG_INSTANTIATE_OPS(float)
MHASEG_INSTANTIATE_OPS(double)

#undef MHASEG_INSTANTIATE_OPS

}  // namespace mhaseg::ad
