// SPDX-License-Identifier: Apache-2.0
#include "mhaseg/nifti.hpp"

#include <zlib.h>

#include <algorithm>
#include <bit>
#include <cmath>
#include <cstring>
#include <fstream>
#include <limits>
#include <string>

#include "mhaseg/error.hpp"
#include "mhaseg/io_util.hpp"

static_assert(std::endian::native == std::endian::little, "host must be little-endian");

namespace mhaseg::nifti {
namespace {

// Byte offsets of the fields we touch inside the 348-byte header.
constexpr std::size_t kOffSizeofHdr = 0;
constexpr std::size_t kOffDim = 40;
constexpr std::size_t kOffDatatype = 70;
constexpr std::size_t kOffBitpix = 72;
constexpr std::size_t kOffPixdim = 76;
constexpr std::size_t kOffVoxOffset = 108;
constexpr std::size_t kOffSclSlope = 112;
constexpr std::size_t kOffSclInter = 116;
constexpr std::size_t kOffXyztUnits = 123;
constexpr std::size_t kOffQformCode = 252;
constexpr std::size_t kOffSformCode = 254;
constexpr std::size_t kOffMagic = 344;

template <typename T>
T load(std::span<const std::byte> bytes, std::size_t offset, bool swap) {
  std::array<std::byte, sizeof(T)> raw{};
  std::memcpy(raw.data(), bytes.data() + offset, sizeof(T));
  if (swap) std::reverse(raw.begin(), raw.end());
  return std::bit_cast<T>(raw);
}

template <typename T>
void store(std::vector<std::byte>& bytes, std::size_t offset, T value) {
  std::memcpy(bytes.data() + offset, &value, sizeof(T));
}

void swap_elements(std::vector<std::byte>& data, std::size_t width) {
  if (width == 1) return;
  for (std::size_t i = 0; i + width <= data.size(); i += width) {
    std::reverse(data.begin() + static_cast<std::ptrdiff_t>(i),
                 data.begin() + static_cast<std::ptrdiff_t>(i + width));
  }
}

template <typename T>
void append_as(const Volume& v, std::vector<double>& out) {
  const std::size_t n = v.element_count();
  out.reserve(n);
  for (std::size_t i = 0; i < n; ++i) {
    T value;
    std::memcpy(&value, v.bytes.data() + i * sizeof(T), sizeof(T));
    out.push_back(static_cast<double>(value));
  }
}

void check_volume(const Volume& volume) {
  if (!is_supported_code(static_cast<int>(volume.kind))) {
    fail(ErrorCode::UnsupportedDatatype, "element kind code " + std::to_string(static_cast<int>(volume.kind)));
  }
  if (volume.shape.empty() || volume.shape.size() > 4) {
    fail(ErrorCode::BadDims, "rank " + std::to_string(volume.shape.size()) + " outside 1..4");
  }
  for (auto extent : volume.shape) {
    if (extent < 1 || extent > static_cast<std::size_t>(std::numeric_limits<std::int16_t>::max())) {
      fail(ErrorCode::BadDims, "extent " + std::to_string(extent) + " not representable");
    }
  }
  if (volume.element_count() * element_size(volume.kind) != volume.bytes.size()) {
    fail(ErrorCode::BadDims, "voxel buffer size does not match shape");
  }
}

}  // namespace

std::size_t element_size(ElementKind kind) {
  switch (kind) {
    case ElementKind::UInt8: return 1;
    case ElementKind::Int16: return 2;
    case ElementKind::Int32: return 4;
    case ElementKind::Float32: return 4;
    case ElementKind::Float64: return 8;
  }
  fail(ErrorCode::UnsupportedDatatype, "element kind code " + std::to_string(static_cast<int>(kind)));
}

bool is_supported_code(int datatype_code) {
  return datatype_code == 2 || datatype_code == 4 || datatype_code == 8 || datatype_code == 16 ||
         datatype_code == 64;
}

bool is_integer(ElementKind kind) {
  return kind == ElementKind::UInt8 || kind == ElementKind::Int16 || kind == ElementKind::Int32;
}

std::size_t Volume::element_count() const {
  if (shape.empty()) return 0;
  std::size_t n = 1;
  for (auto e : shape) n *= e;
  return n;
}

Extent3 Volume::spatial_extent() const {
  for (std::size_t i = 3; i < shape.size(); ++i) {
    if (shape[i] != 1) fail(ErrorCode::BadDims, "volume is not three-dimensional");
  }
  auto ext = [&](std::size_t i) { return i < shape.size() ? shape[i] : std::size_t{1}; };
  return Extent3{ext(2), ext(1), ext(0)};
}

std::vector<double> Volume::to_double() const {
  std::vector<double> out;
  switch (kind) {
    case ElementKind::UInt8: append_as<std::uint8_t>(*this, out); break;
    case ElementKind::Int16: append_as<std::int16_t>(*this, out); break;
    case ElementKind::Int32: append_as<std::int32_t>(*this, out); break;
    case ElementKind::Float32: append_as<float>(*this, out); break;
    case ElementKind::Float64: append_as<double>(*this, out); break;
  }
  return out;
}

std::vector<float> Volume::to_float() const {
  if (kind == ElementKind::Float32) {
    std::vector<float> out(element_count());
    std::memcpy(out.data(), bytes.data(), bytes.size());
    return out;
  }
  auto wide = to_double();
  return {wide.begin(), wide.end()};
}

template <typename T>
Volume Volume::from_values(std::vector<std::size_t> shape, std::span<const T> values) {
  Volume v;
  v.shape = std::move(shape);
  if constexpr (std::is_same_v<T, std::uint8_t>) v.kind = ElementKind::UInt8;
  else if constexpr (std::is_same_v<T, std::int16_t>) v.kind = ElementKind::Int16;
  else if constexpr (std::is_same_v<T, std::int32_t>) v.kind = ElementKind::Int32;
  else if constexpr (std::is_same_v<T, float>) v.kind = ElementKind::Float32;
  else v.kind = ElementKind::Float64;
  if (values.size() != v.element_count()) fail(ErrorCode::BadDims, "value count does not match shape");
  v.bytes.resize(values.size_bytes());
  std::memcpy(v.bytes.data(), values.data(), values.size_bytes());
  return v;
}

template Volume Volume::from_values<std::uint8_t>(std::vector<std::size_t>, std::span<const std::uint8_t>);
template Volume Volume::from_values<std::int16_t>(std::vector<std::size_t>, std::span<const std::int16_t>);
template Volume Volume::from_values<std::int32_t>(std::vector<std::size_t>, std::span<const std::int32_t>);
template Volume Volume::from_values<float>(std::vector<std::size_t>, std::span<const float>);
template Volume Volume::from_values<double>(std::vector<std::size_t>, std::span<const double>);

NiftiHeader decode_header(std::span<const std::byte> bytes, bool* byte_swapped) {
  if (bytes.size() < kHeaderSize) fail(ErrorCode::Truncated, "fewer than 348 header bytes");
  // dim[0] outside 1..7 signals the opposite byte order.
  const auto dim0 = load<std::int16_t>(bytes, kOffDim, false);
  const bool swap = dim0 < 1 || dim0 > 7;
  if (byte_swapped) *byte_swapped = swap;

  NiftiHeader h;
  h.sizeof_hdr = load<std::int32_t>(bytes, kOffSizeofHdr, swap);
  for (std::size_t i = 0; i < 8; ++i) h.dim[i] = load<std::int16_t>(bytes, kOffDim + 2 * i, swap);
  h.datatype_code = load<std::int16_t>(bytes, kOffDatatype, swap);
  h.bitpix = load<std::int16_t>(bytes, kOffBitpix, swap);
  for (std::size_t i = 0; i < 8; ++i) h.pixdim[i] = load<float>(bytes, kOffPixdim + 4 * i, swap);
  h.vox_offset = load<float>(bytes, kOffVoxOffset, swap);
  h.scl_slope = load<float>(bytes, kOffSclSlope, swap);
  h.scl_inter = load<float>(bytes, kOffSclInter, swap);
  std::memcpy(h.magic.data(), bytes.data() + kOffMagic, 4);
  return h;
}

Volume parse_nifti(std::span<const std::byte> file_bytes) {
  std::vector<std::byte> inflated;
  if (is_gzip(file_bytes)) {
    inflated = gzip_decompress(file_bytes);
    file_bytes = inflated;
  }

  bool swap = false;
  const NiftiHeader h = decode_header(file_bytes, &swap);
  if (h.sizeof_hdr != static_cast<std::int32_t>(kHeaderSize)) {
    fail(ErrorCode::BadMagic, "sizeof_hdr is " + std::to_string(h.sizeof_hdr) + ", expected 348");
  }
  if (std::memcmp(h.magic.data(), "ni1\0", 4) == 0) {
    fail(ErrorCode::BadMagic, "dual-file (.hdr/.img) NIfTI-1 is not supported");
  }
  if (std::memcmp(h.magic.data(), "n+1\0", 4) != 0) fail(ErrorCode::BadMagic, "missing n+1 magic");

  const int rank = h.dim[0];
  if (rank < 1 || rank > 4) fail(ErrorCode::BadDims, "rank " + std::to_string(rank) + " outside 1..4");
  if (!is_supported_code(h.datatype_code)) {
    fail(ErrorCode::UnsupportedDatatype, "datatype code " + std::to_string(h.datatype_code));
  }
  const auto kind = static_cast<ElementKind>(h.datatype_code);
  const std::size_t width = element_size(kind);
  if (h.bitpix != static_cast<std::int16_t>(8 * width)) {
    fail(ErrorCode::UnsupportedDatatype,
         "bitpix " + std::to_string(h.bitpix) + " inconsistent with datatype " + std::to_string(h.datatype_code));
  }
  if (!std::isfinite(h.vox_offset) || h.vox_offset < static_cast<float>(kDataOffset) ||
      h.vox_offset > static_cast<float>(file_bytes.size())) {
    if (std::isfinite(h.vox_offset) && h.vox_offset > static_cast<float>(file_bytes.size())) {
      fail(ErrorCode::Truncated, "vox_offset beyond end of file");
    }
    fail(ErrorCode::BadMagic, "vox_offset must be at least 352 in a single-file image");
  }

  Volume v;
  v.kind = kind;
  std::size_t count = 1;
  const std::size_t available = file_bytes.size() - static_cast<std::size_t>(h.vox_offset);
  for (int i = 1; i <= rank; ++i) {
    if (h.dim[i] < 1) fail(ErrorCode::BadDims, "dim[" + std::to_string(i) + "] is " + std::to_string(h.dim[i]));
    v.shape.push_back(static_cast<std::size_t>(h.dim[i]));
    count *= static_cast<std::size_t>(h.dim[i]);
    if (count > available) fail(ErrorCode::Truncated, "voxel data shorter than the header promises");
  }
  const std::size_t nbytes = count * width;
  const auto offset = static_cast<std::size_t>(h.vox_offset);
  if (nbytes > available) fail(ErrorCode::Truncated, "voxel data shorter than the header promises");

  v.bytes.assign(file_bytes.begin() + static_cast<std::ptrdiff_t>(offset),
                 file_bytes.begin() + static_cast<std::ptrdiff_t>(offset + nbytes));
  if (swap) swap_elements(v.bytes, width);
  for (std::size_t i = 0; i < 3; ++i) {
    v.spacing[i] = (static_cast<int>(i) < rank && std::isfinite(h.pixdim[i + 1]) && h.pixdim[i + 1] > 0)
                       ? h.pixdim[i + 1]
                       : 1.0F;
  }

  // slope == 0 (or non-finite) means "no scaling" in NIfTI-1.
  const float slope = h.scl_slope;
  const float inter = std::isfinite(h.scl_inter) ? h.scl_inter : 0.0F;
  if (std::isfinite(slope) && slope != 0.0F && !(slope == 1.0F && inter == 0.0F)) {
    const auto raw = v.to_double();
    std::vector<float> scaled(raw.size());
    for (std::size_t i = 0; i < raw.size(); ++i) {
      scaled[i] = static_cast<float>(raw[i] * static_cast<double>(slope) + static_cast<double>(inter));
    }
    v.kind = ElementKind::Float32;
    v.bytes.resize(scaled.size() * sizeof(float));
    std::memcpy(v.bytes.data(), scaled.data(), v.bytes.size());
  }
  return v;
}

std::vector<std::byte> encode_nifti(const Volume& volume) {
  check_volume(volume);
  std::vector<std::byte> out(kDataOffset + volume.bytes.size(), std::byte{0});
  store<std::int32_t>(out, kOffSizeofHdr, static_cast<std::int32_t>(kHeaderSize));
  store<std::int16_t>(out, kOffDim, static_cast<std::int16_t>(volume.shape.size()));
  for (std::size_t i = 0; i < 7; ++i) {
    const std::int16_t extent = i < volume.shape.size() ? static_cast<std::int16_t>(volume.shape[i]) : 1;
    store<std::int16_t>(out, kOffDim + 2 * (i + 1), extent);
  }
  store<std::int16_t>(out, kOffDatatype, static_cast<std::int16_t>(volume.kind));
  store<std::int16_t>(out, kOffBitpix, static_cast<std::int16_t>(8 * element_size(volume.kind)));
  store<float>(out, kOffPixdim, 1.0F);  // qfac
  for (std::size_t i = 0; i < 7; ++i) {
    store<float>(out, kOffPixdim + 4 * (i + 1), i < 3 ? volume.spacing[i] : 1.0F);
  }
  store<float>(out, kOffVoxOffset, static_cast<float>(kDataOffset));
  store<float>(out, kOffSclSlope, 1.0F);
  store<float>(out, kOffSclInter, 0.0F);
  out[kOffXyztUnits] = std::byte{2};  // millimetres
  store<std::int16_t>(out, kOffQformCode, 0);
  store<std::int16_t>(out, kOffSformCode, 0);
  std::memcpy(out.data() + kOffMagic, "n+1\0", 4);
  std::memcpy(out.data() + kDataOffset, volume.bytes.data(), volume.bytes.size());
  return out;
}

Volume read_nifti(const std::filesystem::path& path) {
  const auto bytes = io::read_file(path);
  return parse_nifti(bytes);
}

void write_nifti(const Volume& volume, const std::filesystem::path& path) {
  auto encoded = encode_nifti(volume);
  if (path.extension() == ".gz") encoded = gzip_compress(encoded);
  io::write_file(path, encoded);
}

bool is_gzip(std::span<const std::byte> data) {
  return data.size() >= 2 && data[0] == std::byte{0x1F} && data[1] == std::byte{0x8B};
}

std::vector<std::byte> gzip_compress(std::span<const std::byte> data) {
  z_stream zs{};
  // windowBits 15 + 16 selects the gzip wrapper. Fixed level keeps output reproducible.
  if (deflateInit2(&zs, 6, Z_DEFLATED, 15 + 16, 8, Z_DEFAULT_STRATEGY) != Z_OK) {
    fail(ErrorCode::IoFailure, "deflateInit2 failed");
  }
  std::vector<std::byte> out(deflateBound(&zs, static_cast<uLong>(data.size())) + 32);
  zs.next_in = reinterpret_cast<Bytef*>(const_cast<std::byte*>(data.data()));
  zs.avail_in = static_cast<uInt>(data.size());
  zs.next_out = reinterpret_cast<Bytef*>(out.data());
  zs.avail_out = static_cast<uInt>(out.size());
  const int rc = deflate(&zs, Z_FINISH);
  const auto produced = zs.total_out;
  deflateEnd(&zs);
  if (rc != Z_STREAM_END) fail(ErrorCode::IoFailure, "gzip compression failed");
  out.resize(produced);
  return out;
}

std::vector<std::byte> gzip_decompress(std::span<const std::byte> data) {
  z_stream zs{};
  if (inflateInit2(&zs, 15 + 16) != Z_OK) fail(ErrorCode::IoFailure, "inflateInit2 failed");
  zs.next_in = reinterpret_cast<Bytef*>(const_cast<std::byte*>(data.data()));
  zs.avail_in = static_cast<uInt>(data.size());
  std::vector<std::byte> out;
  std::array<std::byte, 1 << 16> chunk{};
  int rc = Z_OK;
  while (rc != Z_STREAM_END) {
    zs.next_out = reinterpret_cast<Bytef*>(chunk.data());
    zs.avail_out = static_cast<uInt>(chunk.size());
    rc = inflate(&zs, Z_NO_FLUSH);
    if (rc != Z_OK && rc != Z_STREAM_END) {
      inflateEnd(&zs);
      fail(ErrorCode::Truncated, "corrupt or incomplete gzip stream");
    }
    out.insert(out.end(), chunk.begin(), chunk.begin() + static_cast<std::ptrdiff_t>(chunk.size() - zs.avail_out));
    if (rc == Z_OK && zs.avail_in == 0 && zs.avail_out != 0) {
      inflateEnd(&zs);
      fail(ErrorCode::Truncated, "gzip stream ended early");
    }
  }
  inflateEnd(&zs);
  return out;
}

}  // namespace mhaseg::nifti
