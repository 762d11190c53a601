// SPDX-License-Identifier: Apache-2.0
#pragma once

#include <atomic>
#include <filesystem>
#include <random>
#include <string>
#include <unistd.h>

#include "mhaseg/grid.hpp"

namespace testing_support {

// Fresh directory under the system temp dir, removed on destruction.
class TempDir {
 public:
  TempDir() {
    static std::atomic<int> counter{0};
    path_ = std::filesystem::temp_directory_path() /
            ("mhaseg_test_" + std::to_string(::getpid()) + "_" + std::to_string(counter++));
    std::filesystem::remove_all(path_);
    std::filesystem::create_directories(path_);
  }
  ~TempDir() {
    std::error_code ec;
    std::filesystem::remove_all(path_, ec);
  }
  TempDir(const TempDir&) = delete;
  TempDir& operator=(const TempDir&) = delete;
  const std::filesystem::path& path() const { return path_; }
  std::filesystem::path operator/(const std::string& s) const { return path_ / s; }

 private:
  std::filesystem::path path_;
};

inline mhaseg::LabelGrid random_labels(mhaseg::Extent3 e, std::mt19937_64& rng, int classes = mhaseg::kNumClasses) {
  mhaseg::LabelGrid g(e);
  std::uniform_int_distribution<int> u(0, classes - 1);
  for (auto& v : g.values) v = static_cast<std::uint8_t>(u(rng));
  return g;
}

inline mhaseg::FloatGrid random_image(mhaseg::Extent3 e, std::size_t channels, std::mt19937_64& rng) {
  mhaseg::FloatGrid g(e, channels);
  std::uniform_real_distribution<float> u(0.0F, 1.0F);
  for (auto& v : g.values) v = u(rng);
  return g;
}

}  // namespace testing_support
