// SPDX-License-Identifier: Apache-2.0
// Hand-rolled header field map used to build byte-swapped files independently of the parser.
#pragma once

#include <algorithm>
#include <cstring>
#include <tuple>
#include <cstddef>
#include <utility>
#include <vector>

namespace testing_support {

// (offset, element size, count) of every multi-byte NIfTI-1 header field.
inline const std::vector<std::tuple<std::size_t, std::size_t, std::size_t>>& nifti_fields() {
  static const std::vector<std::tuple<std::size_t, std::size_t, std::size_t>> f{
      {0, 4, 1},     // sizeof_hdr
      {32, 4, 1},    // extents
      {36, 2, 1},    // session_error
      {40, 2, 8},    // dim
      {56, 4, 3},    // intent_p1..3
      {68, 2, 1},    // intent_code
      {70, 2, 1},    // datatype
      {72, 2, 1},    // bitpix
      {74, 2, 1},    // slice_start
      {76, 4, 8},    // pixdim
      {108, 4, 1},   // vox_offset
      {112, 4, 1},   // scl_slope
      {116, 4, 1},   // scl_inter
      {120, 2, 1},   // slice_end
      {124, 4, 6},   // cal_max .. glmin
      {252, 2, 2},   // qform_code, sform_code
      {256, 4, 6},   // quatern_b .. qoffset_z
      {280, 4, 12},  // srow_x, srow_y, srow_z
  };
  return f;
}

// Converts a little-endian single-file image to big-endian.
inline std::vector<std::byte> to_big_endian(std::vector<std::byte> file, std::size_t element_size,
                                            std::size_t data_offset = 352) {
  for (auto [off, size, count] : nifti_fields()) {
    for (std::size_t i = 0; i < count; ++i) {
      std::reverse(file.begin() + static_cast<std::ptrdiff_t>(off + i * size),
                   file.begin() + static_cast<std::ptrdiff_t>(off + (i + 1) * size));
    }
  }
  for (std::size_t p = data_offset; p + element_size <= file.size(); p += element_size) {
    std::reverse(file.begin() + static_cast<std::ptrdiff_t>(p),
                 file.begin() + static_cast<std::ptrdiff_t>(p + element_size));
  }
  return file;
}

template <typename T>
void poke(std::vector<std::byte>& file, std::size_t offset, T value) {
  std::memcpy(file.data() + offset, &value, sizeof(T));
}

template <typename T>
T peek(const std::vector<std::byte>& file, std::size_t offset) {
  T v;
  std::memcpy(&v, file.data() + offset, sizeof(T));
  return v;
}

}  // namespace testing_support
