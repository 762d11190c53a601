// SPDX-License-Identifier: Apache-2.0
#include "mhaseg/synth.hpp"

#include <algorithm>
#include <cmath>
#include <cstdio>
#include <numbers>
#include <random>

#include "mhaseg/error.hpp"
#include "mhaseg/nifti.hpp"

namespace mhaseg::synth {

void SynthConfig::validate() const {
  if (extent.voxels() == 0) fail(ErrorCode::BadConfig, "synthetic extent must be nonempty");
  if (subjects == 0) fail(ErrorCode::BadConfig, "need at least one subject");
  if (!(tumor_ratio > 0 && tumor_ratio < 0.5)) fail(ErrorCode::BadConfig, "tumor ratio must lie in (0, 0.5)");
  if (tumors == 0) fail(ErrorCode::BadConfig, "need at least one tumor");
}

namespace {

// Mean intensity per tissue: outside brain, brain, necrotic, edema, enhancing.
constexpr std::array<std::array<float, 5>, 3> kTissue{{
    {0.0F, 0.40F, 0.20F, 0.85F, 0.60F},  // T2
    {0.0F, 0.40F, 0.15F, 0.35F, 0.95F},  // T1CE
    {0.0F, 0.35F, 0.50F, 0.90F, 0.70F},  // FLAIR
}};
constexpr float kNoise = 0.06F;
constexpr float kScannerScale = 1000.0F;

constexpr double kCoreRadius = 0.45;
constexpr double kEnhancingRadius = 0.7;

// Separable box blur of radius 1, applied in place along each axis (edges clamp).
void blur(FloatGrid& g) {
  const auto [D, H, W] = g.extent;
  std::vector<float> line;
  auto pass = [&](std::size_t n, auto&& idx, std::size_t outer_a, std::size_t outer_b) {
    line.resize(n);
    for (std::size_t a = 0; a < outer_a; ++a) {
      for (std::size_t b = 0; b < outer_b; ++b) {
        for (std::size_t i = 0; i < n; ++i) line[i] = g.values[idx(a, b, i)];
        for (std::size_t i = 0; i < n; ++i) {
          const float l = line[i == 0 ? 0 : i - 1];
          const float r = line[i + 1 == n ? i : i + 1];
          g.values[idx(a, b, i)] = (l + line[i] + r) / 3.0F;
        }
      }
    }
  };
  pass(W, [&](std::size_t z, std::size_t y, std::size_t x) { return g.index(0, z, y, x); }, D, H);
  pass(H, [&](std::size_t z, std::size_t x, std::size_t y) { return g.index(0, z, y, x); }, D, W);
  pass(D, [&](std::size_t y, std::size_t x, std::size_t z) { return g.index(0, z, y, x); }, H, W);
}

}  // namespace

SynthSubject make_subject(Extent3 extent, std::uint64_t seed, double tumor_ratio, std::size_t tumors) {
  SynthConfig{extent, 1, seed, tumor_ratio, tumors}.validate();
  std::mt19937_64 rng(seed);
  std::uniform_real_distribution<double> unit(0.0, 1.0);
  const auto [D, H, W] = extent;
  const double cz = (D - 1) / 2.0, cy = (H - 1) / 2.0, cx = (W - 1) / 2.0;

  // tissue: 0 outside, 1 brain, 2 necrotic, 3 edema, 4 enhancing
  Grid<std::uint8_t> tissue(extent);
  SynthSubject s;
  s.mask = Grid<std::int32_t>(extent);
  for (std::size_t z = 0; z < D; ++z)
    for (std::size_t y = 0; y < H; ++y)
      for (std::size_t x = 0; x < W; ++x) {
        const double rz = (z - cz) / (0.46 * D), ry = (y - cy) / (0.46 * H), rx = (x - cx) / (0.46 * W);
        if (rz * rz + ry * ry + rx * rx <= 1.0) tissue.at(0, z, y, x) = 1;
      }

  // Semi-axes scaled so the ellipsoid volume matches the requested share of voxels.
  const double per_tumor = tumor_ratio * static_cast<double>(extent.voxels()) / static_cast<double>(tumors);
  const double radius = std::cbrt(per_tumor * 3.0 / (4.0 * std::numbers::pi));
  for (std::size_t t = 0; t < tumors; ++t) {
    const double a = 0.8 + 0.4 * unit(rng), b = 0.8 + 0.4 * unit(rng);
    const double c = 1.0 / (a * b);  // keeps a*b*c == 1
    const std::array<double, 3> axes{radius * a, radius * b, radius * c};
    const std::array<double, 3> centre{cz + (unit(rng) - 0.5) * D / 4.0, cy + (unit(rng) - 0.5) * H / 4.0,
                                       cx + (unit(rng) - 0.5) * W / 4.0};
    for (std::size_t z = 0; z < D; ++z)
      for (std::size_t y = 0; y < H; ++y)
        for (std::size_t x = 0; x < W; ++x) {
          const double dz = (z - centre[0]) / axes[0], dy = (y - centre[1]) / axes[1], dx = (x - centre[2]) / axes[2];
          const double r = std::sqrt(dz * dz + dy * dy + dx * dx);
          if (r > 1.0) continue;
          auto& m = s.mask.at(0, z, y, x);
          auto& tis = tissue.at(0, z, y, x);
          if (r < kCoreRadius) {
            m = 1, tis = 2;
          } else if (r < kEnhancingRadius) {
            if (m != 1) m = 4, tis = 4;
          } else if (m == 0) {
            m = 2, tis = 3;
          }
        }
  }

  std::normal_distribution<float> noise(0.0F, 1.0F);
  for (std::size_t m = 0; m < 3; ++m) {
    FloatGrid n(extent);
    for (auto& v : n.values) v = noise(rng);
    blur(n);
    blur(n);
    FloatGrid& out = s.modalities[m];
    out = FloatGrid(extent);
    for (std::size_t i = 0; i < out.values.size(); ++i) {
      const auto tis = tissue.values[i];
      const float base = kTissue[m][tis];
      const float v = tis == 0 ? 0.0F : base + kNoise * 3.0F * n.values[i];
      out.values[i] = std::max(0.0F, v) * kScannerScale;
    }
  }
  return s;
}

std::string subject_id(std::size_t index) {
  char buf[32];
  std::snprintf(buf, sizeof buf, "synth_%03zu", index);
  return buf;
}

std::vector<std::string> write_dataset(const std::filesystem::path& root, const SynthConfig& config) {
  config.validate();
  std::vector<std::string> ids;
  for (std::size_t i = 0; i < config.subjects; ++i) {
    const std::string id = subject_id(i);
    const SynthSubject s = make_subject(config.extent, config.seed + 7919 * i, config.tumor_ratio, config.tumors);
    const auto dir = root / id;
    static constexpr std::array<const char*, 3> kNames{"t2", "t1ce", "flair"};
    const std::vector<std::size_t> shape{config.extent.width, config.extent.height, config.extent.depth};
    for (std::size_t m = 0; m < 3; ++m) {
      nifti::write_nifti(nifti::Volume::from_values<float>(shape, s.modalities[m].values),
                         dir / (id + "_" + kNames[m] + ".nii.gz"));
    }
    std::vector<std::uint8_t> labels(s.mask.values.begin(), s.mask.values.end());
    nifti::write_nifti(nifti::Volume::from_values<std::uint8_t>(shape, labels), dir / (id + "_seg.nii.gz"));
    ids.push_back(id);
  }
  return ids;
}

}  // namespace mhaseg::synth
