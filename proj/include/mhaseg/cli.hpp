// SPDX-License-Identifier: Apache-2.0
#pragma once

#include <cstdint>
#include <filesystem>
#include <map>
#include <string>
#include <vector>

namespace mhaseg::cli {

inline constexpr int kExitOk = 0;
inline constexpr int kExitInput = 2;
inline constexpr int kExitNumeric = 3;

/// Record of one command invocation, written as run.json in the command's output root.
struct RunManifest {
  std::string command;
  std::string config_path;
  std::vector<std::string> inputs;
  std::string output;
  std::uint64_t seed = 0;
  std::string started_at;   // UTC, ISO 8601
  std::string finished_at;
  /// Free-form details (counts, timings); ordered so the file is stable apart from timestamps.
  std::map<std::string, std::string> details;
};

std::string manifest_json(const RunManifest& manifest);
void write_manifest(const std::filesystem::path& dir, const RunManifest& manifest);

/// Parses and runs one subcommand: preprocess, synth-data, train, evaluate, predict, plot.
/// Returns the process exit code; diagnostics go to stderr, progress to stdout.
int run(int argc, const char* const* argv);
int run(const std::vector<std::string>& args);

}  // namespace mhaseg::cli
