// SPDX-License-Identifier: Apache-2.0
#pragma once

#include <filesystem>
#include <optional>
#include <span>
#include <string>
#include <utility>
#include <vector>

#include "mhaseg/grid.hpp"
#include "mhaseg/nifti.hpp"

namespace mhaseg::preprocess {

enum class Modality { T2, T1CE, FLAIR };

std::string_view suffix(Modality m);

struct Subject {
  std::string subject_id;
  std::filesystem::path t2_path;
  std::filesystem::path t1ce_path;
  std::filesystem::path flair_path;
  std::filesystem::path mask_path;

  const std::filesystem::path& path_for(Modality m) const;
};

struct PreprocessConfig {
  Extent3 crop_target{128, 128, 128};
  double label_ratio_threshold = 0.01;
  std::vector<Modality> modalities{Modality::T2, Modality::T1CE, Modality::FLAIR};
  /// Crop extents must be multiples of this. 64 normally; 16 in development mode.
  std::size_t crop_multiple = 64;

  void validate() const;
};

/// A preprocessed training example: channels in [0,1] plus a label grid.
struct Sample {
  std::string subject_id;
  FloatGrid image;
  LabelGrid mask;

  bool operator==(const Sample&) const = default;
};

/// Throws `ShapeMismatch`/`BadConfig`/`NonFiniteInput`/`UnknownLabel` naming the first violated invariant.
void validate_sample(const Sample& sample, std::size_t crop_multiple = 64, std::size_t expected_channels = 3);

/// Whole-volume min-max rescale. A constant volume maps to zeros.
FloatGrid minmax_normalize(const FloatGrid& volume);

/// BraTS labels {0,1,2,4} -> {0,1,2,3}.
LabelGrid remap_labels(const Grid<std::int32_t>& mask);

FloatGrid stack_modalities(std::span<const FloatGrid> volumes);

/// Start index of a centered window, per axis: floor((source - target) / 2).
Extent3 crop_origin(Extent3 source, Extent3 target);

template <typename T>
Grid<T> crop(const Grid<T>& grid, Extent3 origin, Extent3 target);

std::pair<FloatGrid, LabelGrid> center_crop(const FloatGrid& image, const LabelGrid& mask, Extent3 target,
                                            std::size_t multiple = 64);

double nonzero_label_ratio(const LabelGrid& mask);

/// Converts an integer-typed volume (or a float volume holding only exact integers) to a grid.
Grid<std::int32_t> integer_grid(const nifti::Volume& volume);
FloatGrid float_grid(const nifti::Volume& volume);

struct PreprocessResult {
  std::optional<Sample> sample;  // empty: subject skipped by the ratio filter
  double label_ratio = 0.0;
  Extent3 source_extent;
};

/// read -> normalize each modality -> remap mask -> stack -> center crop -> ratio filter.
PreprocessResult preprocess_subject(const Subject& subject, const PreprocessConfig& config);

/// Finds <root>/<id>/<id>_{t2,t1ce,flair,seg}.nii[.gz], sorted by id.
/// Directories missing any of the four files are reported through `incomplete`.
std::vector<Subject> discover_subjects(const std::filesystem::path& root,
                                       std::vector<std::string>* incomplete = nullptr);

// SMP1 sample store: "SMP1", u32 rank, u32 extents[rank], u8 element kind (NIfTI code),
// little-endian payload. Each sample lives in <dir>/<id>/ as image.smp, mask.smp, meta.txt.

struct SmpArray {
  std::vector<std::uint32_t> extents;
  nifti::ElementKind kind = nifti::ElementKind::Float32;
  std::vector<std::byte> payload;
};

std::vector<std::byte> encode_smp(const SmpArray& array);
SmpArray decode_smp(std::span<const std::byte> bytes);
void write_smp(const std::filesystem::path& path, const SmpArray& array);
SmpArray read_smp(const std::filesystem::path& path);

SmpArray to_smp(const FloatGrid& grid);
SmpArray to_smp(const LabelGrid& grid);
FloatGrid float_grid_from_smp(const SmpArray& array);
LabelGrid label_grid_from_smp(const SmpArray& array);

void save_sample(const Sample& sample, const std::filesystem::path& dir);
Sample load_sample(const std::filesystem::path& dir, const std::string& subject_id);

/// Reads <dir>/manifest.txt (one id per line).
std::vector<std::string> read_manifest(const std::filesystem::path& dir);
void write_manifest(const std::filesystem::path& dir, std::span<const std::string> ids);

}  // namespace mhaseg::preprocess
