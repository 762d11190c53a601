// SPDX-License-Identifier: Apache-2.0
#include "mhaseg/autodiff/checkpoint.hpp"

#include <cstring>

#include "mhaseg/io_util.hpp"

namespace mhaseg::ad {

std::vector<std::byte> encode_checkpoint(std::span<const NamedArray> arrays) {
  io::ByteWriter w;
  w.put_string("CKPT");
  w.put<std::uint32_t>(static_cast<std::uint32_t>(arrays.size()));
  for (const auto& a : arrays) {
    if (a.values.size() != numel(a.shape)) fail(ErrorCode::ShapeMismatch, "checkpoint entry " + a.name);
    w.put<std::uint32_t>(static_cast<std::uint32_t>(a.name.size()));
    w.put_string(a.name);
    w.put<std::uint32_t>(static_cast<std::uint32_t>(a.shape.size()));
    for (auto e : a.shape) w.put<std::uint32_t>(static_cast<std::uint32_t>(e));
    w.put_bytes(std::as_bytes(std::span<const float>(a.values)));
  }
  return w.bytes();
}

std::vector<NamedArray> decode_checkpoint(std::span<const std::byte> bytes) {
  io::ByteReader r(bytes, ErrorCode::CorruptSample);
  if (r.get_string(4) != "CKPT") fail(ErrorCode::CorruptSample, "missing CKPT magic");
  const auto count = r.get<std::uint32_t>();
  std::vector<NamedArray> out;
  for (std::uint32_t i = 0; i < count; ++i) {
    NamedArray a;
    a.name = r.get_string(r.get<std::uint32_t>());
    const auto rank = r.get<std::uint32_t>();
    if (rank > 8) fail(ErrorCode::CorruptSample, "rank " + std::to_string(rank) + " for " + a.name);
    for (std::uint32_t j = 0; j < rank; ++j) a.shape.push_back(r.get<std::uint32_t>());
    const std::size_t n = numel(a.shape);
    if (n > r.remaining() / sizeof(float)) fail(ErrorCode::CorruptSample, "payload of " + a.name + " truncated");
    const auto raw = r.get_bytes(n * sizeof(float));
    a.values.resize(n);
    std::memcpy(a.values.data(), raw.data(), raw.size());
    out.push_back(std::move(a));
  }
  if (r.remaining() != 0) fail(ErrorCode::CorruptSample, "trailing bytes after last checkpoint entry");
  return out;
}

void save_checkpoint(const std::filesystem::path& path, std::span<const NamedArray> arrays) {
  io::write_file(path, encode_checkpoint(arrays));
}

std::vector<NamedArray> load_checkpoint(const std::filesystem::path& path) {
  return decode_checkpoint(io::read_file(path));
}

}  // namespace mhaseg::ad
