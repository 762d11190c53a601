// SPDX-License-Identifier: Apache-2.0
#pragma once

#include <filesystem>
#include <optional>
#include <string>
#include <string_view>
#include <vector>

#include "mhaseg/model.hpp"
#include "mhaseg/preprocess.hpp"
#include "mhaseg/trainer.hpp"

namespace mhaseg::config {

/// Every tunable of a run. Text form is one `section.field = value` per line, `#` comments.
/// train.learning_rate and train.batch_size accept comma lists; their product is the grid.
struct RunConfig {
  preprocess::PreprocessConfig preprocess;
  model::ModelConfig model;
  trainer::TrainConfig train;
  std::vector<double> learning_rates{1e-3};
  std::vector<std::size_t> batch_sizes{2};
  /// Unset means "take the extent of the training samples".
  std::optional<Extent3> input_extent;
};

/// Applies one `key = value` assignment; BadConfig on unknown keys or unparsable values.
void apply(RunConfig& config, std::string_view key, std::string_view value);
/// Applies "key=value".
void apply_assignment(RunConfig& config, std::string_view assignment);

RunConfig parse(std::string_view text);
RunConfig load(const std::filesystem::path& path);

/// Canonical text form; parse(format(c)) reproduces c.
std::string format(const RunConfig& config);

Extent3 parse_extent(std::string_view text);
std::string format_extent(Extent3 e);

}  // namespace mhaseg::config
