// SPDX-License-Identifier: Apache-2.0
#include <doctest.h>

#include <cmath>
#include <random>

#include "fixtures.hpp"
#include "mhaseg/error.hpp"
#include "mhaseg/io_util.hpp"
#include "mhaseg/nifti.hpp"
#include "nifti_fixtures.hpp"

using namespace mhaseg;
using namespace mhaseg::nifti;
using testing_support::peek;
using testing_support::poke;

namespace {

ErrorCode parse_error(const std::vector<std::byte>& bytes) {
  try {
    parse_nifti(bytes);
  } catch (const Error& e) {
    return e.code();
  }
  FAIL("expected a parse error");
  return ErrorCode::IoFailure;
}

template <typename T>
Volume random_volume(std::vector<std::size_t> shape, std::mt19937_64& rng) {
  std::size_t n = 1;
  for (auto e : shape) n *= e;
  std::vector<T> v(n);
  if constexpr (std::is_floating_point_v<T>) {
    std::normal_distribution<double> d(0, 100);
    for (auto& x : v) x = static_cast<T>(d(rng));
  } else {
    std::uniform_int_distribution<long long> d(std::numeric_limits<T>::min(), std::numeric_limits<T>::max());
    for (auto& x : v) x = static_cast<T>(d(rng));
  }
  return Volume::from_values<T>(std::move(shape), v);
}

}  // namespace

TEST_SUITE("nifti") {

TEST_CASE("float32 rank-3 header decodes to a 4x4x4 volume") {
  std::vector<float> values(64, 1.25F);
  const auto file = encode_nifti(Volume::from_values<float>({4, 4, 4}, values));
  CHECK(peek<std::int32_t>(file, 0) == 348);
  CHECK(peek<std::int16_t>(file, 40) == 3);
  const Volume v = parse_nifti(file);
  CHECK(v.shape == std::vector<std::size_t>{4, 4, 4});
  CHECK(v.kind == ElementKind::Float32);
  CHECK(v.element_count() == 64);
}

TEST_CASE("gzip container is detected by its prefix and parses identically") {
  testing_support::TempDir dir;
  std::mt19937_64 rng(3);
  const Volume v = random_volume<std::int16_t>({5, 3, 2}, rng);
  write_nifti(v, dir / "a.nii.gz");
  const auto raw = io::read_file(dir / "a.nii.gz");
  REQUIRE(raw.size() > 2);
  CHECK(raw[0] == std::byte{0x1F});
  CHECK(raw[1] == std::byte{0x8B});
  CHECK(read_nifti(dir / "a.nii.gz") == v);
  CHECK(parse_nifti(raw) == parse_nifti(encode_nifti(v)));
}

TEST_CASE("intensity scaling promotes to float32") {
  std::vector<std::int16_t> values{3, -2};
  auto file = encode_nifti(Volume::from_values<std::int16_t>({2}, values));
  poke<float>(file, 112, 2.0F);
  poke<float>(file, 116, 1.0F);
  const Volume v = parse_nifti(file);
  CHECK(v.kind == ElementKind::Float32);
  const auto out = v.to_float();
  // hand-applied slope * v + inter
  CHECK(out[0] == 2.0F * 3 + 1.0F);
  CHECK(out[1] == 2.0F * -2 + 1.0F);
}

TEST_CASE("identity scaling and zero slope leave the kind alone") {
  std::vector<std::int16_t> values{3, -2};
  auto file = encode_nifti(Volume::from_values<std::int16_t>({2}, values));
  CHECK(parse_nifti(file).kind == ElementKind::Int16);
  poke<float>(file, 112, 0.0F);
  poke<float>(file, 116, 5.0F);
  CHECK(parse_nifti(file).kind == ElementKind::Int16);
}

TEST_CASE("round trip is exact for every supported kind") {
  testing_support::TempDir dir;
  std::mt19937_64 rng(11);
  const std::vector<Volume> volumes{random_volume<std::uint8_t>({3, 4, 5}, rng),
                                    random_volume<std::int16_t>({7, 2, 3}, rng),
                                    random_volume<std::int32_t>({2, 2, 2, 3}, rng),
                                    random_volume<float>({6}, rng), random_volume<double>({4, 5}, rng)};
  for (const auto& v : volumes) {
    CHECK(parse_nifti(encode_nifti(v)) == v);
    write_nifti(v, dir / "v.nii");
    CHECK(read_nifti(dir / "v.nii") == v);
  }
}

TEST_CASE("all-zero uint8 2x2x2 is header, pad and eight zero bytes") {
  std::vector<std::uint8_t> zeros(8, 0);
  const auto file = encode_nifti(Volume::from_values<std::uint8_t>({2, 2, 2}, zeros));
  REQUIRE(file.size() == 352 + 8);
  for (std::size_t i = 348; i < file.size(); ++i) CHECK(file[i] == std::byte{0});
  CHECK(peek<float>(file, 108) == 352.0F);
  CHECK(peek<float>(file, 112) == 1.0F);
  CHECK(peek<float>(file, 116) == 0.0F);
  CHECK(std::memcmp(file.data() + 344, "n+1\0", 4) == 0);
}

TEST_CASE("float64 uses datatype 64 and bitpix 64") {
  std::vector<double> one{1.5};
  const auto file = encode_nifti(Volume::from_values<double>({1, 1, 1}, one));
  CHECK(peek<std::int16_t>(file, 70) == 64);
  CHECK(peek<std::int16_t>(file, 72) == 64);
  CHECK(parse_nifti(file).to_double()[0] == 1.5);
}

TEST_CASE("big-endian files parse to the same volume") {
  std::mt19937_64 rng(5);
  for (const Volume& v : {random_volume<std::int16_t>({4, 3, 2}, rng), random_volume<float>({3, 3, 3}, rng),
                          random_volume<double>({2, 5}, rng), random_volume<std::int32_t>({9}, rng)}) {
    auto le = encode_nifti(v);
    poke<float>(le, 76 + 4, 1.5F);  // non-trivial spacing must survive the swap too
    const auto be = testing_support::to_big_endian(le, element_size(v.kind));
    bool swapped = false;
    decode_header(be, &swapped);
    CHECK(swapped);
    CHECK(parse_nifti(be) == parse_nifti(le));
  }
}

TEST_CASE("malformed headers map to the enumerated errors") {
  std::vector<float> values(8, 0.5F);
  const auto good = encode_nifti(Volume::from_values<float>({2, 2, 2}, values));

  CHECK(parse_error(std::vector<std::byte>(good.begin(), good.begin() + 100)) == ErrorCode::Truncated);
  auto f = good;
  std::memcpy(f.data() + 344, "xyz\0", 4);
  CHECK(parse_error(f) == ErrorCode::BadMagic);
  f = good;
  std::memcpy(f.data() + 344, "ni1\0", 4);
  CHECK(parse_error(f) == ErrorCode::BadMagic);
  f = good;
  poke<std::int32_t>(f, 0, 540);  // NIfTI-2 header size
  CHECK(parse_error(f) == ErrorCode::BadMagic);
  f = good;
  poke<std::int16_t>(f, 70, 512);  // uint16, not supported
  CHECK(parse_error(f) == ErrorCode::UnsupportedDatatype);
  f = good;
  poke<std::int16_t>(f, 72, 16);  // bitpix disagrees with float32
  CHECK(parse_error(f) == ErrorCode::UnsupportedDatatype);
  f = good;
  poke<std::int16_t>(f, 40, 5);
  poke<std::int16_t>(f, 48, 1);
  poke<std::int16_t>(f, 50, 1);
  CHECK(parse_error(f) == ErrorCode::BadDims);
  f = good;
  poke<std::int16_t>(f, 44, 0);
  CHECK(parse_error(f) == ErrorCode::BadDims);
  f = good;
  f.resize(f.size() - 1);
  CHECK(parse_error(f) == ErrorCode::Truncated);
  f = good;
  poke<std::int16_t>(f, 42, 30000);
  CHECK(parse_error(f) == ErrorCode::Truncated);
}

TEST_CASE("random bytes never escape the enumerated parse errors") {
  std::mt19937_64 rng(99);
  std::vector<float> values(27, 1.0F);
  const auto good = encode_nifti(Volume::from_values<float>({3, 3, 3}, values));
  for (int i = 0; i < 300; ++i) {
    std::vector<std::byte> bytes;
    if (i % 2 == 0) {
      bytes.resize(rng() % 4097);
      for (auto& b : bytes) b = static_cast<std::byte>(rng());
    } else {
      bytes = good;
      for (int k = 0; k < 4; ++k) bytes[rng() % bytes.size()] = static_cast<std::byte>(rng());
      bytes.resize(rng() % (bytes.size() + 1));
    }
    try {
      const Volume v = parse_nifti(bytes);
      CHECK(v.element_count() * element_size(v.kind) == v.bytes.size());
    } catch (const Error& e) {
      const auto c = e.code();
      CHECK((c == ErrorCode::BadMagic || c == ErrorCode::UnsupportedDatatype || c == ErrorCode::Truncated ||
             c == ErrorCode::BadDims));
    }
  }
}

TEST_CASE("missing file is an I/O failure") {
  CHECK_THROWS_AS(read_nifti("/nonexistent/really/not.nii"), Error);
}

}
