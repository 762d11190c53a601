// SPDX-License-Identifier: Apache-2.0
#pragma once

#include <filesystem>
#include <span>
#include <string>
#include <vector>

#include "mhaseg/autodiff/tensor.hpp"

namespace mhaseg::ad {

struct NamedArray {
  std::string name;
  Shape shape;
  std::vector<float> values;

  bool operator==(const NamedArray&) const = default;
};

// CKPT layout: "CKPT", u32 count, then per array: u32 name length, name bytes,
// u32 rank, u32 extents[rank], float32 payload. All little-endian.
std::vector<std::byte> encode_checkpoint(std::span<const NamedArray> arrays);
/// Throws CorruptSample on malformed input.
std::vector<NamedArray> decode_checkpoint(std::span<const std::byte> bytes);

void save_checkpoint(const std::filesystem::path& path, std::span<const NamedArray> arrays);
std::vector<NamedArray> load_checkpoint(const std::filesystem::path& path);

}  // namespace mhaseg::ad
