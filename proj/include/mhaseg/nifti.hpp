// SPDX-License-Identifier: Apache-2.0
#pragma once

#include <array>
#include <cstddef>
#include <cstdint>
#include <filesystem>
#include <span>
#include <vector>

#include "mhaseg/grid.hpp"

namespace mhaseg::nifti {

/// Supported voxel element kinds. The enumerator values are the NIfTI-1 datatype codes.
enum class ElementKind : std::uint8_t {
  UInt8 = 2,
  Int16 = 4,
  Int32 = 8,
  Float32 = 16,
  Float64 = 64,
};

std::size_t element_size(ElementKind kind);
bool is_supported_code(int datatype_code);
bool is_integer(ElementKind kind);

inline constexpr std::size_t kHeaderSize = 348;
inline constexpr std::size_t kDataOffset = 352;

/// The subset of the 348-byte NIfTI-1 header this library reads and writes.
struct NiftiHeader {
  std::int32_t sizeof_hdr = 348;
  std::array<std::int16_t, 8> dim{};
  std::int16_t datatype_code = 0;
  std::int16_t bitpix = 0;
  std::array<float, 8> pixdim{};
  float vox_offset = 352.0F;
  float scl_slope = 1.0F;
  float scl_inter = 0.0F;
  std::array<char, 4> magic{'n', '+', '1', '\0'};
};

/// A decoded volume.
///
/// `shape` lists extents in NIfTI order, fastest-varying axis first (x, y, z[, t]).
/// `bytes` holds host-endian elements in that same order, which means a rank-3 volume
/// is already a row-major (z, y, x) array; `spatial_extent()` gives that view.
struct Volume {
  std::vector<std::size_t> shape;
  ElementKind kind = ElementKind::Float32;
  std::vector<std::byte> bytes;
  std::array<float, 3> spacing{1.0F, 1.0F, 1.0F};

  std::size_t element_count() const;
  /// (depth, height, width) = (nz, ny, nx). Trailing extents of 1 are allowed.
  Extent3 spatial_extent() const;

  std::vector<float> to_float() const;
  std::vector<double> to_double() const;

  template <typename T>
  static Volume from_values(std::vector<std::size_t> shape, std::span<const T> values);

  bool operator==(const Volume&) const = default;
};

/// Decode an in-memory single-file NIfTI-1 image; gzip containers are detected by prefix.
Volume parse_nifti(std::span<const std::byte> file_bytes);
/// Encode as an uncompressed "n+1" file image.
std::vector<std::byte> encode_nifti(const Volume& volume);

/// Reads .nii or .nii.gz (sniffed, not by extension).
Volume read_nifti(const std::filesystem::path& path);
/// Writes gzip-compressed when the path ends in ".gz".
void write_nifti(const Volume& volume, const std::filesystem::path& path);

/// Raw header decode after endianness resolution; no semantic validation beyond layout.
NiftiHeader decode_header(std::span<const std::byte> header_bytes, bool* byte_swapped = nullptr);

std::vector<std::byte> gzip_compress(std::span<const std::byte> data);
std::vector<std::byte> gzip_decompress(std::span<const std::byte> data);
bool is_gzip(std::span<const std::byte> data);

}  // namespace mhaseg::nifti
