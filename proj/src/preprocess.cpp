// SPDX-License-Identifier: Apache-2.0
#include "mhaseg/preprocess.hpp"

#include <algorithm>
#include <cmath>
#include <cstring>
#include <sstream>

#include "mhaseg/error.hpp"
#include "mhaseg/io_util.hpp"

namespace mhaseg::preprocess {

namespace fs = std::filesystem;

std::string_view suffix(Modality m) {
  switch (m) {
    case Modality::T2: return "t2";
    case Modality::T1CE: return "t1ce";
    case Modality::FLAIR: return "flair";
  }
  return "";
}

const fs::path& Subject::path_for(Modality m) const {
  switch (m) {
    case Modality::T2: return t2_path;
    case Modality::T1CE: return t1ce_path;
    case Modality::FLAIR: return flair_path;
  }
  return t2_path;
}

void PreprocessConfig::validate() const {
  if (crop_multiple == 0) fail(ErrorCode::BadConfig, "crop multiple must be positive");
  for (auto e : {crop_target.depth, crop_target.height, crop_target.width}) {
    if (e == 0 || e % crop_multiple != 0) {
      fail(ErrorCode::BadConfig,
           "crop target " + crop_target.str() + " is not a multiple of " + std::to_string(crop_multiple));
    }
  }
  if (!(label_ratio_threshold >= 0.0 && label_ratio_threshold < 1.0)) {
    fail(ErrorCode::BadConfig, "label ratio threshold must lie in [0, 1)");
  }
  if (modalities.empty()) fail(ErrorCode::BadConfig, "no modalities selected");
}

void validate_sample(const Sample& s, std::size_t crop_multiple, std::size_t expected_channels) {
  if (s.image.channels != expected_channels) {
    fail(ErrorCode::ShapeMismatch, "sample has " + std::to_string(s.image.channels) + " channels");
  }
  const auto& e = s.image.extent;
  for (auto v : {e.depth, e.height, e.width}) {
    if (v == 0 || v % crop_multiple != 0) {
      fail(ErrorCode::BadConfig, "sample extent " + e.str() + " not divisible by " + std::to_string(crop_multiple));
    }
  }
  if (s.image.values.size() != s.image.channels * e.voxels()) fail(ErrorCode::ShapeMismatch, "image buffer size");
  if (!(s.mask.extent == e) || s.mask.channels != 1 || s.mask.values.size() != e.voxels()) {
    fail(ErrorCode::ShapeMismatch, "mask extent " + s.mask.extent.str() + " differs from image " + e.str());
  }
  for (float v : s.image.values) {
    if (!(v >= 0.0F && v <= 1.0F)) fail(ErrorCode::NonFiniteInput, "image value outside [0,1]");
  }
  for (auto l : s.mask.values) {
    if (l > 3) fail(ErrorCode::UnknownLabel, "mask label " + std::to_string(l));
  }
}

FloatGrid minmax_normalize(const FloatGrid& volume) {
  FloatGrid out = volume;
  if (volume.values.empty()) return out;
  double lo = volume.values.front();
  double hi = lo;
  for (float v : volume.values) {
    if (!std::isfinite(v)) fail(ErrorCode::NonFiniteInput, "volume contains NaN or Inf");
    lo = std::min(lo, static_cast<double>(v));
    hi = std::max(hi, static_cast<double>(v));
  }
  if (hi == lo) {
    std::fill(out.values.begin(), out.values.end(), 0.0F);
    return out;
  }
  const double span = hi - lo;
  for (auto& v : out.values) {
    v = std::clamp(static_cast<float>((static_cast<double>(v) - lo) / span), 0.0F, 1.0F);
  }
  return out;
}

LabelGrid remap_labels(const Grid<std::int32_t>& mask) {
  LabelGrid out;
  out.extent = mask.extent;
  out.channels = mask.channels;
  out.values.resize(mask.values.size());
  for (std::size_t i = 0; i < mask.values.size(); ++i) {
    const std::int32_t v = mask.values[i];
    switch (v) {
      case 0:
      case 1:
      case 2: out.values[i] = static_cast<std::uint8_t>(v); break;
      case 4: out.values[i] = 3; break;
      default: fail(ErrorCode::UnknownLabel, "mask value " + std::to_string(v) + " not in {0,1,2,4}");
    }
  }
  return out;
}

FloatGrid stack_modalities(std::span<const FloatGrid> volumes) {
  if (volumes.empty()) fail(ErrorCode::ShapeMismatch, "no volumes to stack");
  FloatGrid out;
  out.extent = volumes.front().extent;
  out.channels = 0;
  for (const auto& v : volumes) {
    if (!(v.extent == out.extent)) {
      fail(ErrorCode::ShapeMismatch, "modality extent " + v.extent.str() + " differs from " + out.extent.str());
    }
    out.channels += v.channels;
    out.values.insert(out.values.end(), v.values.begin(), v.values.end());
  }
  return out;
}

Extent3 crop_origin(Extent3 source, Extent3 target) {
  if (target.depth > source.depth || target.height > source.height || target.width > source.width) {
    fail(ErrorCode::TargetTooLarge, "crop target " + target.str() + " exceeds source " + source.str());
  }
  return {(source.depth - target.depth) / 2, (source.height - target.height) / 2,
          (source.width - target.width) / 2};
}

template <typename T>
Grid<T> crop(const Grid<T>& grid, Extent3 origin, Extent3 target) {
  Grid<T> out(target, grid.channels);
  for (std::size_t c = 0; c < grid.channels; ++c) {
    for (std::size_t z = 0; z < target.depth; ++z) {
      for (std::size_t y = 0; y < target.height; ++y) {
        const auto src = grid.values.begin() +
                         static_cast<std::ptrdiff_t>(grid.index(c, z + origin.depth, y + origin.height, origin.width));
        std::copy(src, src + static_cast<std::ptrdiff_t>(target.width),
                  out.values.begin() + static_cast<std::ptrdiff_t>(out.index(c, z, y, 0)));
      }
    }
  }
  return out;
}

template Grid<float> crop(const Grid<float>&, Extent3, Extent3);
template Grid<std::uint8_t> crop(const Grid<std::uint8_t>&, Extent3, Extent3);
template Grid<std::int32_t> crop(const Grid<std::int32_t>&, Extent3, Extent3);

std::pair<FloatGrid, LabelGrid> center_crop(const FloatGrid& image, const LabelGrid& mask, Extent3 target,
                                            std::size_t multiple) {
  if (!(image.extent == mask.extent)) fail(ErrorCode::ShapeMismatch, "image and mask extents differ");
  for (auto e : {target.depth, target.height, target.width}) {
    if (e == 0 || e % multiple != 0) {
      fail(ErrorCode::BadConfig, "crop target " + target.str() + " not a multiple of " + std::to_string(multiple));
    }
  }
  const Extent3 origin = crop_origin(image.extent, target);
  return {crop(image, origin, target), crop(mask, origin, target)};
}

double nonzero_label_ratio(const LabelGrid& mask) {
  if (mask.values.empty()) return 0.0;
  const auto nonzero = std::count_if(mask.values.begin(), mask.values.end(), [](auto v) { return v != 0; });
  return static_cast<double>(nonzero) / static_cast<double>(mask.values.size());
}

Grid<std::int32_t> integer_grid(const nifti::Volume& volume) {
  Grid<std::int32_t> out;
  out.extent = volume.spatial_extent();
  const auto wide = volume.to_double();
  out.values.resize(wide.size());
  for (std::size_t i = 0; i < wide.size(); ++i) {
    const double v = wide[i];
    if (!nifti::is_integer(volume.kind) && (std::floor(v) != v || std::abs(v) > 1e9)) {
      fail(ErrorCode::UnknownLabel, "mask volume holds non-integer value " + std::to_string(v));
    }
    out.values[i] = static_cast<std::int32_t>(v);
  }
  return out;
}

FloatGrid float_grid(const nifti::Volume& volume) {
  FloatGrid out;
  out.extent = volume.spatial_extent();
  out.values = volume.to_float();
  return out;
}

PreprocessResult preprocess_subject(const Subject& subject, const PreprocessConfig& config) {
  config.validate();
  std::vector<FloatGrid> channels;
  channels.reserve(config.modalities.size());
  for (auto m : config.modalities) {
    channels.push_back(minmax_normalize(float_grid(nifti::read_nifti(subject.path_for(m)))));
  }
  const LabelGrid mask = remap_labels(integer_grid(nifti::read_nifti(subject.mask_path)));
  const FloatGrid image = stack_modalities(channels);
  if (!(mask.extent == image.extent)) {
    fail(ErrorCode::ShapeMismatch, "mask extent " + mask.extent.str() + " differs from image " + image.extent.str());
  }
  auto [cropped_image, cropped_mask] = center_crop(image, mask, config.crop_target, config.crop_multiple);

  PreprocessResult result;
  result.source_extent = image.extent;
  result.label_ratio = nonzero_label_ratio(cropped_mask);
  if (result.label_ratio > config.label_ratio_threshold) {
    result.sample = Sample{subject.subject_id, std::move(cropped_image), std::move(cropped_mask)};
  }
  return result;
}

std::vector<Subject> discover_subjects(const fs::path& root, std::vector<std::string>* incomplete) {
  std::vector<Subject> subjects;
  if (!fs::is_directory(root)) fail(ErrorCode::IoFailure, "input root " + root.string() + " is not a directory");
  std::vector<fs::path> dirs;
  for (const auto& entry : fs::directory_iterator(root)) {
    if (entry.is_directory()) dirs.push_back(entry.path());
  }
  std::sort(dirs.begin(), dirs.end());
  for (const auto& dir : dirs) {
    const std::string id = dir.filename().string();
    auto find = [&](std::string_view tag) -> fs::path {
      for (const char* ext : {".nii.gz", ".nii"}) {
        auto p = dir / (id + "_" + std::string(tag) + ext);
        if (fs::exists(p)) return p;
      }
      return {};
    };
    Subject s{id, find("t2"), find("t1ce"), find("flair"), find("seg")};
    if (s.t2_path.empty() || s.t1ce_path.empty() || s.flair_path.empty() || s.mask_path.empty()) {
      if (incomplete) incomplete->push_back(id);
      continue;
    }
    subjects.push_back(std::move(s));
  }
  return subjects;
}

std::vector<std::byte> encode_smp(const SmpArray& array) {
  std::size_t count = 1;
  for (auto e : array.extents) count *= e;
  if (count * nifti::element_size(array.kind) != array.payload.size()) {
    fail(ErrorCode::CorruptSample, "payload size does not match extents");
  }
  io::ByteWriter w;
  w.put_string("SMP1");
  w.put<std::uint32_t>(static_cast<std::uint32_t>(array.extents.size()));
  for (auto e : array.extents) w.put<std::uint32_t>(e);
  w.put<std::uint8_t>(static_cast<std::uint8_t>(array.kind));
  w.put_bytes(array.payload);
  return w.bytes();
}

SmpArray decode_smp(std::span<const std::byte> bytes) {
  io::ByteReader r(bytes, ErrorCode::CorruptSample);
  if (r.get_string(4) != "SMP1") fail(ErrorCode::CorruptSample, "missing SMP1 magic");
  SmpArray out;
  const auto rank = r.get<std::uint32_t>();
  if (rank == 0 || rank > 8) fail(ErrorCode::CorruptSample, "rank " + std::to_string(rank));
  std::size_t count = 1;
  for (std::uint32_t i = 0; i < rank; ++i) {
    out.extents.push_back(r.get<std::uint32_t>());
    count *= out.extents.back();
    if (count > bytes.size()) fail(ErrorCode::CorruptSample, "extents exceed payload");
  }
  const auto code = r.get<std::uint8_t>();
  if (!nifti::is_supported_code(code)) fail(ErrorCode::CorruptSample, "element kind " + std::to_string(code));
  out.kind = static_cast<nifti::ElementKind>(code);
  const std::size_t nbytes = count * nifti::element_size(out.kind);
  if (r.remaining() != nbytes) fail(ErrorCode::CorruptSample, "payload length does not match extents");
  auto payload = r.get_bytes(nbytes);
  out.payload.assign(payload.begin(), payload.end());
  return out;
}

void write_smp(const fs::path& path, const SmpArray& array) { io::write_file(path, encode_smp(array)); }

SmpArray read_smp(const fs::path& path) { return decode_smp(io::read_file(path)); }

namespace {

template <typename T>
SmpArray grid_to_smp(const Grid<T>& grid, nifti::ElementKind kind, bool with_channels) {
  SmpArray a;
  if (with_channels) a.extents.push_back(static_cast<std::uint32_t>(grid.channels));
  a.extents.push_back(static_cast<std::uint32_t>(grid.extent.depth));
  a.extents.push_back(static_cast<std::uint32_t>(grid.extent.height));
  a.extents.push_back(static_cast<std::uint32_t>(grid.extent.width));
  a.kind = kind;
  a.payload.resize(grid.values.size() * sizeof(T));
  std::memcpy(a.payload.data(), grid.values.data(), a.payload.size());
  return a;
}

template <typename T>
Grid<T> smp_to_grid(const SmpArray& a, nifti::ElementKind kind) {
  if (a.kind != kind) fail(ErrorCode::CorruptSample, "unexpected element kind");
  Grid<T> g;
  if (a.extents.size() == 4) {
    g.channels = a.extents[0];
    g.extent = {a.extents[1], a.extents[2], a.extents[3]};
  } else if (a.extents.size() == 3) {
    g.extent = {a.extents[0], a.extents[1], a.extents[2]};
  } else {
    fail(ErrorCode::CorruptSample, "expected rank 3 or 4, got " + std::to_string(a.extents.size()));
  }
  g.values.resize(g.channels * g.extent.voxels());
  if (g.values.size() * sizeof(T) != a.payload.size()) fail(ErrorCode::CorruptSample, "payload size");
  std::memcpy(g.values.data(), a.payload.data(), a.payload.size());
  return g;
}

}  // namespace

SmpArray to_smp(const FloatGrid& grid) { return grid_to_smp(grid, nifti::ElementKind::Float32, true); }
SmpArray to_smp(const LabelGrid& grid) { return grid_to_smp(grid, nifti::ElementKind::UInt8, false); }
FloatGrid float_grid_from_smp(const SmpArray& a) { return smp_to_grid<float>(a, nifti::ElementKind::Float32); }
LabelGrid label_grid_from_smp(const SmpArray& a) {
  auto g = smp_to_grid<std::uint8_t>(a, nifti::ElementKind::UInt8);
  if (g.channels != 1) fail(ErrorCode::CorruptSample, "label grid must have one channel");
  return g;
}

void save_sample(const Sample& sample, const fs::path& dir) {
  const fs::path sub = dir / sample.subject_id;
  write_smp(sub / "image.smp", to_smp(sample.image));
  write_smp(sub / "mask.smp", to_smp(sample.mask));
  io::write_text(sub / "meta.txt", "subject_id=" + sample.subject_id + "\n");
}

Sample load_sample(const fs::path& dir, const std::string& subject_id) {
  const fs::path sub = dir / subject_id;
  Sample s;
  const std::string meta = io::read_text(sub / "meta.txt");
  const std::string expected = "subject_id=" + subject_id + "\n";
  if (meta != expected) fail(ErrorCode::CorruptSample, "metadata in " + sub.string() + " does not name " + subject_id);
  s.subject_id = subject_id;
  s.image = float_grid_from_smp(read_smp(sub / "image.smp"));
  s.mask = label_grid_from_smp(read_smp(sub / "mask.smp"));
  if (!(s.image.extent == s.mask.extent)) fail(ErrorCode::CorruptSample, "image and mask extents differ");
  return s;
}

std::vector<std::string> read_manifest(const fs::path& dir) {
  std::istringstream in(io::read_text(dir / "manifest.txt"));
  std::vector<std::string> ids;
  for (std::string line; std::getline(in, line);) {
    if (!line.empty()) ids.push_back(line);
  }
  return ids;
}

void write_manifest(const fs::path& dir, std::span<const std::string> ids) {
  std::string text;
  for (const auto& id : ids) text += id + "\n";
  io::write_text(dir / "manifest.txt", text);
}

}  // namespace mhaseg::preprocess
