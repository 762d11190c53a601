// SPDX-License-Identifier: Apache-2.0
#pragma once

#include <array>
#include <cstddef>
#include <cstdint>
#include <filesystem>
#include <string>
#include <vector>

#include "mhaseg/grid.hpp"

namespace mhaseg::synth {

struct SynthConfig {
  Extent3 extent{64, 64, 64};
  std::size_t subjects = 2;
  std::uint64_t seed = 0;
  /// Target fraction of nonzero mask voxels, split evenly across `tumors`.
  double tumor_ratio = 0.05;
  std::size_t tumors = 1;

  void validate() const;
};

/// Raw volumes in BraTS conventions: modality intensities in arbitrary scanner-like units
/// and a mask using label 4 for the enhancing rim.
struct SynthSubject {
  std::array<FloatGrid, 3> modalities;  // T2, T1CE, FLAIR
  Grid<std::int32_t> mask;
};

/// Ellipsoidal tumors inside a brain ellipsoid. Each tumor has a necrotic core (1),
/// an enhancing shell (4) and an outer edema shell (2). Deterministic in `seed`.
SynthSubject make_subject(Extent3 extent, std::uint64_t seed, double tumor_ratio, std::size_t tumors = 1);

/// synth_000, synth_001, ...
std::string subject_id(std::size_t index);

/// Writes <root>/<id>/<id>_{t2,t1ce,flair,seg}.nii.gz for every subject; returns the ids.
std::vector<std::string> write_dataset(const std::filesystem::path& root, const SynthConfig& config);

}  // namespace mhaseg::synth
