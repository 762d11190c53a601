// SPDX-License-Identifier: Apache-2.0
#pragma once

#include <cstddef>
#include <cstdint>
#include <string>
#include <vector>

namespace mhaseg {

/// Spatial extents in row-major order: depth is the slowest axis, width the fastest.
struct Extent3 {
  std::size_t depth = 0;
  std::size_t height = 0;
  std::size_t width = 0;

  std::size_t voxels() const { return depth * height * width; }
  bool operator==(const Extent3&) const = default;
  std::string str() const;
};

/// Dense multi-channel voxel grid, channel-major then (z, y, x) row-major.
template <typename T>
struct Grid {
  Extent3 extent;
  std::size_t channels = 1;
  std::vector<T> values;

  Grid() = default;
  Grid(Extent3 e, std::size_t c = 1, T fill = T{}) : extent(e), channels(c), values(c * e.voxels(), fill) {}

  std::size_t index(std::size_t c, std::size_t z, std::size_t y, std::size_t x) const {
    return ((c * extent.depth + z) * extent.height + y) * extent.width + x;
  }
  T& at(std::size_t c, std::size_t z, std::size_t y, std::size_t x) { return values[index(c, z, y, x)]; }
  const T& at(std::size_t c, std::size_t z, std::size_t y, std::size_t x) const { return values[index(c, z, y, x)]; }

  bool operator==(const Grid&) const = default;
};

using FloatGrid = Grid<float>;
/// Voxel labels: 0 background, 1 necrotic core, 2 edema, 3 enhancing tumor.
using LabelGrid = Grid<std::uint8_t>;

inline constexpr int kNumClasses = 4;

}  // namespace mhaseg
