// SPDX-License-Identifier: Apache-2.0
#include <doctest.h>

#include <cmath>
#include <random>
#include <sstream>

#include "fixtures.hpp"
#include "mhaseg/config.hpp"
#include "mhaseg/error.hpp"
#include "mhaseg/io_util.hpp"
#include "mhaseg/render.hpp"
#include "mhaseg/synth.hpp"

using namespace mhaseg;

namespace {

ErrorCode code_of(auto&& f) {
  try {
    f();
  } catch (const Error& e) {
    return e.code();
  }
  return ErrorCode::IoFailure;
}

}  // namespace

TEST_SUITE("config") {

TEST_CASE("parse, apply and format") {
  const auto c = config::parse(R"(# a comment
model.base_filters = 8
model.heads=2
train.learning_rate = 1e-3, 5e-4
train.batch_size = 1,2
train.epochs = 3   # trailing comment
preprocess.crop_target = 32,48,64
model.input_extent = 16
)");
  CHECK(c.model.base_filters == 8);
  CHECK(c.model.heads == 2);
  CHECK(c.learning_rates == std::vector<double>{1e-3, 5e-4});
  CHECK(c.batch_sizes == std::vector<std::size_t>{1, 2});
  CHECK(c.train.epochs == 3);
  CHECK(c.preprocess.crop_target == Extent3{32, 48, 64});
  CHECK(c.input_extent == Extent3{16, 16, 16});

  const auto again = config::parse(config::format(c));
  CHECK(again.model == c.model);
  CHECK(again.train == c.train);
  CHECK(again.learning_rates == c.learning_rates);
  CHECK(again.batch_sizes == c.batch_sizes);
  CHECK(again.input_extent == c.input_extent);
  CHECK(again.preprocess.crop_target == c.preprocess.crop_target);

  auto d = c;
  config::apply_assignment(d, "train.seed=12");
  CHECK(d.train.seed == 12);
}

TEST_CASE("bad input names the line") {
  for (const char* text : {"model.nope = 1", "model.heads = x", "model.heads", "train.batch_size = 1,,2",
                           "train.val_fraction = 0.2.1", "preprocess.crop_target = 1,2"}) {
    INFO(text);
    CHECK(code_of([&] { config::parse(text); }) == ErrorCode::BadConfig);
  }
  try {
    config::parse("\n\nmodel.bogus = 3\n");
    FAIL("expected an error");
  } catch (const Error& e) {
    CHECK(std::string(e.what()).find("line 3") != std::string::npos);
  }
  CHECK(config::parse_extent("7") == Extent3{7, 7, 7});
  CHECK(config::format_extent({1, 2, 3}) == "1,2,3");
}

TEST_CASE("load from a file") {
  testing_support::TempDir dir;
  io::write_text(dir / "run.cfg", "train.epochs = 4\n");
  CHECK(config::load(dir / "run.cfg").train.epochs == 4);
  CHECK(code_of([&] { config::load(dir / "missing.cfg"); }) == ErrorCode::IoFailure);
}

}

TEST_SUITE("synth") {

TEST_CASE("subjects are deterministic and hit the tumor ratio") {
  const auto a = synth::make_subject({32, 32, 32}, 5, 0.05);
  const auto b = synth::make_subject({32, 32, 32}, 5, 0.05);
  CHECK(a.mask == b.mask);
  CHECK(a.modalities[0] == b.modalities[0]);
  CHECK(synth::make_subject({32, 32, 32}, 6, 0.05).mask != a.mask);

  std::array<std::size_t, 5> counts{};
  for (auto v : a.mask.values) {
    REQUIRE((v == 0 || v == 1 || v == 2 || v == 4));
    ++counts[v];
  }
  const double ratio = 1.0 - static_cast<double>(counts[0]) / static_cast<double>(a.mask.values.size());
  CHECK(ratio == doctest::Approx(0.05).epsilon(0.25));
  CHECK(counts[1] > 0);
  CHECK(counts[2] > 0);
  CHECK(counts[4] > 0);
  for (const auto& m : a.modalities) {
    for (float v : m.values) CHECK(v >= 0.0F);
  }

  const auto two = synth::make_subject({32, 32, 32}, 5, 0.05, 2);
  std::size_t nonzero = 0;
  for (auto v : two.mask.values) nonzero += v != 0;
  CHECK(nonzero > 0);
}

TEST_CASE("config validation and ids") {
  synth::SynthConfig c;
  c.tumor_ratio = 0.6;
  CHECK(code_of([&] { c.validate(); }) == ErrorCode::BadConfig);
  c.tumor_ratio = 0.05;
  c.subjects = 0;
  CHECK(code_of([&] { c.validate(); }) == ErrorCode::BadConfig);
  CHECK(synth::subject_id(7) == "synth_007");
}

TEST_CASE("write_dataset lays out BraTS-style files") {
  testing_support::TempDir dir;
  synth::SynthConfig c;
  c.extent = {16, 16, 16};
  c.subjects = 2;
  const auto ids = synth::write_dataset(dir.path(), c);
  REQUIRE(ids.size() == 2);
  for (const auto& id : ids)
    for (const char* s : {"_t2", "_t1ce", "_flair", "_seg"}) CHECK(std::filesystem::exists(dir / (id + "/" + id + s + ".nii.gz")));
}

}

TEST_SUITE("render") {

TEST_CASE("ppm encoding") {
  const std::vector<render::Rgb> px{{1, 2, 3}, {4, 5, 6}};
  const auto bytes = render::encode_ppm(2, 1, px);
  const std::string head = "P6\n2 1\n255\n";
  REQUIRE(bytes.size() == head.size() + 6);
  CHECK(std::string(reinterpret_cast<const char*>(bytes.data()), head.size()) == head);
  CHECK(static_cast<int>(bytes.back()) == 6);
  CHECK(code_of([&] { render::encode_ppm(3, 1, px); }) == ErrorCode::ShapeMismatch);
}

TEST_CASE("overlay blends labelled pixels") {
  FloatGrid img({2, 1, 2}, 3, 0.0F);
  img.at(1, 0, 0, 0) = 1.0F;
  img.at(1, 0, 0, 1) = 0.5F;
  img.at(1, 1, 0, 0) = 2.0F;  // clamps
  LabelGrid lab({2, 1, 2});
  lab.at(0, 0, 0, 1) = 1;
  const auto s0 = render::overlay_slice(img, lab, 0, 1);
  CHECK(s0[0] == render::Rgb{255, 255, 255});
  // gray 128 blended with red
  CHECK(s0[1] == render::Rgb{192, 64, 64});
  const auto s1 = render::overlay_slice(img, lab, 1, 1);
  CHECK(s1[0] == render::Rgb{255, 255, 255});
  CHECK(s1[1] == render::Rgb{0, 0, 0});

  testing_support::TempDir dir;
  CHECK(render::write_overlays(dir.path(), img, lab, 1) == 2);
  CHECK(std::filesystem::exists(dir / "slice_001.ppm"));
}

TEST_CASE("all-background overlay stays grayscale, one slice per depth") {
  std::mt19937_64 rng(3);
  const auto img = testing_support::random_image({5, 3, 4}, 3, rng);
  const LabelGrid lab({5, 3, 4});
  for (std::size_t z = 0; z < 5; ++z)
    for (const auto& p : render::overlay_slice(img, lab, z, 2)) CHECK((p.r == p.g && p.g == p.b));
  testing_support::TempDir dir;
  CHECK(render::write_overlays(dir.path(), img, lab, 2) == 5);
  std::size_t files = 0;
  for ([[maybe_unused]] const auto& e : std::filesystem::directory_iterator(dir.path())) ++files;
  CHECK(files == 5);
}

TEST_CASE("chart points follow the series") {
  std::vector<double> loss(50);
  for (std::size_t i = 0; i < loss.size(); ++i) loss[i] = 2.0 / static_cast<double>(i + 1);
  const std::vector<render::Series> s{{"train", loss, "#000"}};
  const auto svg = render::line_chart_svg("Loss", "loss", s);
  const auto start = svg.find("points=\"", svg.find("<polyline")) + 8;
  std::istringstream pts(svg.substr(start, svg.find('"', start) - start));
  std::vector<std::pair<double, double>> xy;
  std::string pair;
  while (pts >> pair) {
    const auto comma = pair.find(',');
    xy.emplace_back(std::stod(pair.substr(0, comma)), std::stod(pair.substr(comma + 1)));
  }
  REQUIRE(xy.size() == 50);
  // SVG y grows downward, so a falling loss gives rising y.
  for (std::size_t i = 1; i < xy.size(); ++i) {
    CHECK(xy[i].first > xy[i - 1].first);
    CHECK(xy[i].second >= xy[i - 1].second);
  }
}

TEST_CASE("line chart svg") {
  const std::vector<render::Series> s{{"train", {1.0, 0.5, 0.25}, "#1f77b4"}, {"val", {1.2, 0.7, 0.6}, "#ff7f0e"}};
  const auto svg = render::line_chart_svg("Loss", "loss", s);
  CHECK(svg.starts_with("<?xml"));
  CHECK(std::count(svg.begin(), svg.end(), '\n') > 5);
  std::size_t lines = 0;
  for (auto pos = svg.find("<polyline"); pos != std::string::npos; pos = svg.find("<polyline", pos + 1)) ++lines;
  CHECK(lines == 2);
  CHECK(svg.find("train") != std::string::npos);
  CHECK(svg.find("</svg>") != std::string::npos);
}

}
