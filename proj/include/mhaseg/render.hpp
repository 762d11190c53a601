// SPDX-License-Identifier: Apache-2.0
#pragma once

#include <array>
#include <cstddef>
#include <cstdint>
#include <filesystem>
#include <span>
#include <string>
#include <vector>

#include "mhaseg/grid.hpp"

namespace mhaseg::render {

struct Rgb {
  std::uint8_t r = 0, g = 0, b = 0;
  bool operator==(const Rgb&) const = default;
};

/// Label colours; index 0 (background) is unused.
inline constexpr std::array<Rgb, kNumClasses> kPalette{{{0, 0, 0}, {255, 0, 0}, {0, 255, 0}, {255, 255, 0}}};

/// Binary P6 with maxval 255.
std::vector<std::byte> encode_ppm(std::size_t width, std::size_t height, std::span<const Rgb> pixels);

/// Axial slice `z` of image channel `channel` as grayscale, with labelled voxels blended
/// 50/50 with their class colour. Pixels are row-major over (y, x).
std::vector<Rgb> overlay_slice(const FloatGrid& image, const LabelGrid& labels, std::size_t z, std::size_t channel);

/// One slice_NNN.ppm per depth index under `dir`; returns the number written.
std::size_t write_overlays(const std::filesystem::path& dir, const FloatGrid& image, const LabelGrid& labels,
                           std::size_t channel);

struct Series {
  std::string name;
  std::vector<double> values;  // value at epoch i + 1
  std::string colour;
};

/// Standalone SVG 1.1 line chart with one polyline per series over epochs 1..N.
std::string line_chart_svg(const std::string& title, const std::string& y_label, std::span<const Series> series);

}  // namespace mhaseg::render
