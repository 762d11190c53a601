// SPDX-License-Identifier: Apache-2.0
#include <doctest.h>

#include <algorithm>
#include <random>

#include "fixtures.hpp"
#include "mhaseg/error.hpp"
#include "mhaseg/io_util.hpp"
#include "mhaseg/preprocess.hpp"

using namespace mhaseg;
using namespace mhaseg::preprocess;
using testing_support::TempDir;

namespace {

FloatGrid grid_of(std::vector<float> v) {
  FloatGrid g(Extent3{1, 1, v.size()});
  g.values = std::move(v);
  return g;
}

Grid<std::int32_t> int_mask(Extent3 e, std::mt19937_64& rng) {
  Grid<std::int32_t> m(e);
  const int labels[] = {0, 1, 2, 4};
  for (auto& v : m.values) v = labels[rng() % 4];
  return m;
}

ErrorCode code_of(auto&& f) {
  try {
    f();
  } catch (const Error& e) {
    return e.code();
  }
  return ErrorCode::IoFailure;
}

// Writes one subject as NIfTI files in the BraTS layout.
void write_subject(const std::filesystem::path& root, const std::string& id, const std::array<FloatGrid, 3>& mods,
                   const Grid<std::int32_t>& mask) {
  const auto e = mask.extent;
  const std::vector<std::size_t> shape{e.width, e.height, e.depth};
  const char* names[] = {"t2", "t1ce", "flair"};
  for (int m = 0; m < 3; ++m) {
    nifti::write_nifti(nifti::Volume::from_values<float>(shape, mods[m].values),
                       root / id / (id + "_" + names[m] + ".nii"));
  }
  std::vector<std::int16_t> labels(mask.values.begin(), mask.values.end());
  nifti::write_nifti(nifti::Volume::from_values<std::int16_t>(shape, labels), root / id / (id + "_seg.nii.gz"));
}

}  // namespace

TEST_SUITE("preprocess") {

TEST_CASE("minmax_normalize rescales to the unit interval") {
  CHECK(minmax_normalize(grid_of({2, 4, 6})).values == std::vector<float>{0.0F, 0.5F, 1.0F});
  CHECK(minmax_normalize(grid_of({5, 5, 5})).values == std::vector<float>{0, 0, 0});
  CHECK(code_of([] { minmax_normalize(grid_of({1, NAN})); }) == ErrorCode::NonFiniteInput);
  CHECK(code_of([] { minmax_normalize(grid_of({1, INFINITY})); }) == ErrorCode::NonFiniteInput);
}

TEST_CASE("minmax_normalize spans [0,1] and is idempotent on random volumes") {
  std::mt19937_64 rng(1);
  for (int trial = 0; trial < 20; ++trial) {
    FloatGrid g(Extent3{4, 5, 6});
    std::normal_distribution<float> d(100.0F, 40.0F);
    for (auto& v : g.values) v = d(rng);
    const auto n = minmax_normalize(g);
    const auto [lo, hi] = std::minmax_element(n.values.begin(), n.values.end());
    CHECK(std::abs(*lo) <= 1e-7F);
    CHECK(std::abs(*hi - 1.0F) <= 1e-7F);
    const auto twice = minmax_normalize(n);
    for (std::size_t i = 0; i < n.values.size(); ++i) CHECK(std::abs(twice.values[i] - n.values[i]) <= 1e-7F);
  }
}

TEST_CASE("remap_labels maps 4 to 3 and preserves class counts") {
  Grid<std::int32_t> m(Extent3{1, 1, 4});
  m.values = {0, 1, 2, 4};
  CHECK(remap_labels(m).values == std::vector<std::uint8_t>{0, 1, 2, 3});
  Grid<std::int32_t> zeros(Extent3{2, 2, 2});
  CHECK(remap_labels(zeros).values == std::vector<std::uint8_t>(8, 0));
  Grid<std::int32_t> bad(Extent3{1, 1, 2});
  bad.values = {0, 3};
  CHECK(code_of([&] { remap_labels(bad); }) == ErrorCode::UnknownLabel);

  std::mt19937_64 rng(2);
  const auto mask = int_mask({6, 5, 4}, rng);
  const auto out = remap_labels(mask);
  for (auto [from, to] : {std::pair{0, 0}, {1, 1}, {2, 2}, {4, 3}}) {
    CHECK(std::count(mask.values.begin(), mask.values.end(), from) ==
          std::count(out.values.begin(), out.values.end(), to));
  }
  CHECK(std::count(out.values.begin(), out.values.end(), 4) == 0);
}

TEST_CASE("stack_modalities keeps channel order") {
  std::mt19937_64 rng(3);
  std::vector<FloatGrid> v{testing_support::random_image({4, 4, 4}, 1, rng),
                           testing_support::random_image({4, 4, 4}, 1, rng),
                           testing_support::random_image({4, 4, 4}, 1, rng)};
  const auto s = stack_modalities(v);
  CHECK(s.channels == 3);
  CHECK(s.extent == Extent3{4, 4, 4});
  for (std::size_t i = 0; i < 64; ++i) CHECK(s.values[64 + i] == v[1].values[i]);
  v[2] = FloatGrid(Extent3{4, 4, 5});
  CHECK(code_of([&] { stack_modalities(v); }) == ErrorCode::ShapeMismatch);
}

TEST_CASE("center_crop uses a floor-centred window for image and mask") {
  CHECK(crop_origin({70, 70, 70}, {64, 64, 64}) == Extent3{3, 3, 3});
  CHECK(crop_origin({71, 64, 65}, {64, 64, 64}) == Extent3{3, 0, 0});
  CHECK(code_of([] { crop_origin({60, 70, 70}, {64, 64, 64}); }) == ErrorCode::TargetTooLarge);

  std::mt19937_64 rng(4);
  const Extent3 src{70, 70, 70};
  const auto image = testing_support::random_image(src, 2, rng);
  const auto mask = testing_support::random_labels(src, rng);
  const auto [ci, cm] = center_crop(image, mask, {64, 64, 64}, 64);
  CHECK(ci.extent == Extent3{64, 64, 64});
  CHECK(cm.extent == Extent3{64, 64, 64});
  for (std::size_t z = 0; z < 64; z += 7)
    for (std::size_t y = 0; y < 64; y += 5)
      for (std::size_t x = 0; x < 64; x += 3) {
        CHECK(cm.at(0, z, y, x) == mask.at(0, z + 3, y + 3, x + 3));
        CHECK(ci.at(1, z, y, x) == image.at(1, z + 3, y + 3, x + 3));
      }
  const auto [same_i, same_m] = center_crop(ci, cm, {64, 64, 64}, 64);
  CHECK(same_i == ci);
  CHECK(same_m == cm);
  CHECK(code_of([&] { center_crop(image, mask, {48, 64, 64}, 64); }) == ErrorCode::BadConfig);
  CHECK(center_crop(image, mask, {48, 64, 64}, 16).first.extent == Extent3{48, 64, 64});
}

TEST_CASE("crop commutes with remap") {
  std::mt19937_64 rng(5);
  const auto mask = int_mask({9, 8, 10}, rng);
  const Extent3 target{4, 4, 4};
  const auto origin = crop_origin(mask.extent, target);
  CHECK(remap_labels(crop(mask, origin, target)) == crop(remap_labels(mask), origin, target));
}

TEST_CASE("nonzero_label_ratio is an exact fraction") {
  LabelGrid m(Extent3{10, 10, 10});
  for (int i = 0; i < 15; ++i) m.values[i * 37] = static_cast<std::uint8_t>(1 + i % 3);
  CHECK(nonzero_label_ratio(m) == 0.015);
  CHECK(nonzero_label_ratio(LabelGrid(Extent3{2, 2, 2})) == 0.0);
  CHECK(nonzero_label_ratio(LabelGrid(Extent3{2, 2, 2}, 1, 2)) == 1.0);
}

TEST_CASE("config validation") {
  PreprocessConfig c;
  CHECK_NOTHROW(c.validate());
  c.crop_target = {96, 128, 128};
  CHECK(code_of([&] { c.validate(); }) == ErrorCode::BadConfig);
  c.crop_multiple = 16;
  CHECK_NOTHROW(c.validate());
  c.label_ratio_threshold = 1.0;
  CHECK(code_of([&] { c.validate(); }) == ErrorCode::BadConfig);
}

TEST_CASE("integer_grid accepts integral float masks only") {
  std::vector<float> ok{0, 1, 2, 4};
  CHECK(integer_grid(nifti::Volume::from_values<float>({4}, ok)).values == std::vector<std::int32_t>{0, 1, 2, 4});
  std::vector<float> frac{0, 1.5F};
  CHECK_THROWS_AS(integer_grid(nifti::Volume::from_values<float>({2}, frac)), Error);
}

TEST_CASE("preprocess_subject filters on the cropped ratio, straddling 1%") {
  TempDir dir;
  std::mt19937_64 rng(6);
  const Extent3 src{20, 20, 20}, target{16, 16, 16};  // cropped volume has 4096 voxels
  PreprocessConfig cfg;
  cfg.crop_target = target;
  cfg.crop_multiple = 16;
  // 41 labelled voxels -> 1.0009% (accept), 40 -> 0.977% (reject), 0 -> reject.
  for (int labelled : {41, 40, 0, 200}) {
    const std::string id = "s" + std::to_string(labelled);
    std::array<FloatGrid, 3> mods{testing_support::random_image(src, 1, rng), testing_support::random_image(src, 1, rng),
                                  testing_support::random_image(src, 1, rng)};
    for (auto& m : mods)
      for (auto& v : m.values) v *= 500.0F;
    Grid<std::int32_t> mask(src);
    // inside the crop window [2, 18) on every axis; one voxel outside that must not count
    for (int i = 0; i < labelled; ++i) mask.at(0, 2 + i % 16, 2 + (i / 16) % 16, 2 + i / 256) = i % 2 ? 4 : 1;
    mask.at(0, 0, 0, 0) = 2;
    write_subject(dir.path(), id, mods, mask);
  }
  std::vector<std::string> incomplete;
  const auto subjects = discover_subjects(dir.path(), &incomplete);
  REQUIRE(subjects.size() == 4);
  CHECK(incomplete.empty());
  for (const auto& s : subjects) {
    const auto r = preprocess_subject(s, cfg);
    const int labelled = std::stoi(s.subject_id.substr(1));
    CHECK(r.label_ratio == static_cast<double>(labelled) / 4096.0);
    CHECK(r.sample.has_value() == (labelled > 40));
    CHECK(r.source_extent == src);
    if (r.sample) {
      CHECK_NOTHROW(validate_sample(*r.sample, 16, 3));
      CHECK(r.sample->image.extent == target);
      for (float v : r.sample->image.values) CHECK((v >= 0.0F && v <= 1.0F));
      CHECK(std::count(r.sample->mask.values.begin(), r.sample->mask.values.end(), 3) == labelled / 2);
    }
    // lowering the threshold never rejects an accepted subject
    PreprocessConfig lower = cfg;
    lower.label_ratio_threshold = 0.005;
    if (r.sample) CHECK(preprocess_subject(s, lower).sample.has_value());
  }
}

TEST_CASE("discover_subjects reports incomplete directories") {
  TempDir dir;
  std::filesystem::create_directories(dir / "lonely");
  io::write_text(dir.path() / "lonely" / "lonely_t2.nii", "x");
  std::vector<std::string> incomplete;
  CHECK(discover_subjects(dir.path(), &incomplete).empty());
  CHECK(incomplete == std::vector<std::string>{"lonely"});
  CHECK_THROWS_AS(discover_subjects(dir / "missing"), Error);
}

TEST_CASE("sample store round trip and format") {
  TempDir dir;
  std::mt19937_64 rng(7);
  Sample s{"case_7", testing_support::random_image({16, 16, 16}, 3, rng), testing_support::random_labels({16, 16, 16}, rng)};
  save_sample(s, dir.path());
  CHECK(load_sample(dir.path(), "case_7") == s);
  const auto bytes = io::read_file(dir.path() / "case_7" / "image.smp");
  CHECK(std::memcmp(bytes.data(), "SMP1", 4) == 0);
  std::uint32_t rank;
  std::memcpy(&rank, bytes.data() + 4, 4);
  CHECK(rank == 4);
  CHECK(static_cast<std::uint8_t>(bytes[4 + 4 + 16]) == 16);  // float32 kind code
  CHECK(bytes.size() == 4 + 4 + 16 + 1 + 3 * 4096 * 4);

  auto truncated = bytes;
  truncated.pop_back();
  CHECK(code_of([&] { decode_smp(truncated); }) == ErrorCode::CorruptSample);
  auto bad_magic = bytes;
  bad_magic[0] = std::byte{'X'};
  CHECK(code_of([&] { decode_smp(bad_magic); }) == ErrorCode::CorruptSample);
  CHECK(code_of([&] { load_sample(dir.path(), "absent"); }) == ErrorCode::IoFailure);

  const std::vector<std::string> ids{"a", "b"};
  write_manifest(dir.path(), ids);
  CHECK(read_manifest(dir.path()) == ids);
}

}
