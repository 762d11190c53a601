// SPDX-License-Identifier: Apache-2.0
#pragma once

#include <array>
#include <cstdint>
#include <span>
#include <string>
#include <string_view>

#include "mhaseg/grid.hpp"

namespace mhaseg::metrics {

/// One-vs-rest voxel tallies for a single class.
struct ConfusionCounts {
  std::uint64_t tp = 0;
  std::uint64_t tn = 0;
  std::uint64_t fp = 0;
  std::uint64_t fn = 0;

  std::uint64_t total() const { return tp + tn + fp + fn; }
  ConfusionCounts& operator+=(const ConfusionCounts& o);
  bool operator==(const ConfusionCounts&) const = default;
};

/// Throws ShapeMismatch on differing extents and BadLabel on a class or voxel label outside 0..3.
ConfusionCounts confusion_counts(const LabelGrid& pred, const LabelGrid& truth, int class_id);

/// (tp + tn) / total; EmptyGrid when total is zero.
double accuracy(const ConfusionCounts& c);
/// 1.0 when the class is absent from both prediction and truth.
double iou(const ConfusionCounts& c);
double dice(const ConfusionCounts& c);
double iou(const LabelGrid& pred, const LabelGrid& truth, int class_id);
double dice(const LabelGrid& pred, const LabelGrid& truth, int class_id);
// Zero denominators score 1.0.
double precision(const ConfusionCounts& c);
double sensitivity(const ConfusionCounts& c);
double specificity(const ConfusionCounts& c);

inline constexpr double kBceClamp = 1e-7;

/// Mean binary cross-entropy with p clamped to [1e-7, 1 - 1e-7]. Throws ShapeMismatch.
template <typename P, typename Y>
double bce_loss(std::span<const P> probs, std::span<const Y> truth);

inline constexpr std::array<std::string_view, kNumClasses> kClassNames{"background", "necrotic", "edema",
                                                                          "enhancing"};

struct ClassMetrics {
  double accuracy = 0;
  double iou = 0;
  double dice = 0;
  double precision = 0;
  double sensitivity = 0;
  double specificity = 0;
  double soft_dice = 0;

  static ClassMetrics from_counts(const ConfusionCounts& c);
  bool operator==(const ClassMetrics&) const = default;
};

struct MetricsReport {
  std::array<ConfusionCounts, kNumClasses> counts{};
  std::array<ClassMetrics, kNumClasses> per_class{};
  /// Mean over the tumor classes 1..3; background is excluded.
  ClassMetrics macro;
  /// Fraction of voxels whose predicted label equals the truth.
  double voxel_accuracy = 0;
  /// Mean one-vs-rest binary cross-entropy of the tumor-class probabilities.
  double bce_loss = 0;
  /// 1 - macro soft Dice.
  double dice_loss = 0;

  static std::string csv_header();
  std::string csv_row() const;
  std::string text() const;
};

/// Sums counts and soft-overlap terms over samples so ratios are formed once at the end.
class MetricsAccumulator {
 public:
  /// probs: num_classes x D x H x W in the extents of `truth`; may be empty, which leaves
  /// the probability-based fields at zero.
  void add(const LabelGrid& pred, const LabelGrid& truth, std::span<const float> probs);
  /// Adds another accumulator's totals, as if its samples had been added here.
  void merge(const MetricsAccumulator& other);
  MetricsReport report() const;
  std::uint64_t samples() const { return samples_; }

 private:
  std::array<ConfusionCounts, kNumClasses> counts_{};
  std::array<double, kNumClasses> intersection_{};
  std::array<double, kNumClasses> prob_sum_{};
  std::array<double, kNumClasses> truth_sum_{};
  double bce_sum_ = 0;
  std::uint64_t voxels_ = 0;
  std::uint64_t correct_ = 0;
  std::uint64_t samples_ = 0;
  bool have_probs_ = false;
};

MetricsReport report(const LabelGrid& pred, const LabelGrid& truth, std::span<const float> probs);

}  // namespace mhaseg::metrics
