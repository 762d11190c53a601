// SPDX-License-Identifier: Apache-2.0
#include "mhaseg/metrics.hpp"

#include <algorithm>
#include <cmath>
#include <iomanip>
#include <sstream>

#include "mhaseg/autodiff/ops.hpp"
#include "mhaseg/error.hpp"

namespace mhaseg::metrics {

ConfusionCounts& ConfusionCounts::operator+=(const ConfusionCounts& o) {
  tp += o.tp;
  tn += o.tn;
  fp += o.fp;
  fn += o.fn;
  return *this;
}

namespace {

void check_pair(const LabelGrid& pred, const LabelGrid& truth) {
  if (pred.extent != truth.extent || pred.values.size() != truth.values.size()) {
    fail(ErrorCode::ShapeMismatch, "prediction " + pred.extent.str() + " vs truth " + truth.extent.str());
  }
}

void check_label(std::uint8_t v) {
  if (v >= kNumClasses) fail(ErrorCode::BadLabel, "label " + std::to_string(v) + " outside 0..3");
}

double ratio(std::uint64_t num, std::uint64_t den) {
  return den == 0 ? 1.0 : static_cast<double>(num) / static_cast<double>(den);
}

}  // namespace

ConfusionCounts confusion_counts(const LabelGrid& pred, const LabelGrid& truth, int class_id) {
  check_pair(pred, truth);
  if (class_id < 0 || class_id >= kNumClasses) {
    fail(ErrorCode::BadLabel, "class " + std::to_string(class_id) + " outside 0..3");
  }
  ConfusionCounts c;
  const auto k = static_cast<std::uint8_t>(class_id);
  for (std::size_t i = 0; i < pred.values.size(); ++i) {
    const auto p = pred.values[i];
    const auto t = truth.values[i];
    check_label(p);
    check_label(t);
    const bool pp = p == k;
    const bool tt = t == k;
    c.tp += pp && tt;
    c.tn += !pp && !tt;
    c.fp += pp && !tt;
    c.fn += !pp && tt;
  }
  return c;
}

double accuracy(const ConfusionCounts& c) {
  if (c.total() == 0) fail(ErrorCode::EmptyGrid, "accuracy of an empty grid");
  return static_cast<double>(c.tp + c.tn) / static_cast<double>(c.total());
}

double iou(const ConfusionCounts& c) { return ratio(c.tp, c.tp + c.fp + c.fn); }
double dice(const ConfusionCounts& c) { return ratio(2 * c.tp, 2 * c.tp + c.fp + c.fn); }
double iou(const LabelGrid& pred, const LabelGrid& truth, int class_id) {
  return iou(confusion_counts(pred, truth, class_id));
}
double dice(const LabelGrid& pred, const LabelGrid& truth, int class_id) {
  return dice(confusion_counts(pred, truth, class_id));
}
double precision(const ConfusionCounts& c) { return ratio(c.tp, c.tp + c.fp); }
double sensitivity(const ConfusionCounts& c) { return ratio(c.tp, c.tp + c.fn); }
double specificity(const ConfusionCounts& c) { return ratio(c.tn, c.tn + c.fp); }

template <typename P, typename Y>
double bce_loss(std::span<const P> probs, std::span<const Y> truth) {
  if (probs.size() != truth.size()) {
    fail(ErrorCode::ShapeMismatch, "bce_loss over " + std::to_string(probs.size()) + " probabilities and " +
                                       std::to_string(truth.size()) + " targets");
  }
  if (probs.empty()) fail(ErrorCode::EmptyGrid, "bce_loss of an empty grid");
  double acc = 0;
  for (std::size_t i = 0; i < probs.size(); ++i) {
    const double p = std::clamp(static_cast<double>(probs[i]), kBceClamp, 1.0 - kBceClamp);
    const double y = static_cast<double>(truth[i]);
    acc += y * std::log(p) + (1.0 - y) * std::log(1.0 - p);
  }
  return -acc / static_cast<double>(probs.size());
}

template double bce_loss<float, float>(std::span<const float>, std::span<const float>);
template double bce_loss<double, double>(std::span<const double>, std::span<const double>);
template double bce_loss<float, std::uint8_t>(std::span<const float>, std::span<const std::uint8_t>);
template double bce_loss<double, std::uint8_t>(std::span<const double>, std::span<const std::uint8_t>);

ClassMetrics ClassMetrics::from_counts(const ConfusionCounts& c) {
  ClassMetrics m;
  m.accuracy = metrics::accuracy(c);
  m.iou = metrics::iou(c);
  m.dice = metrics::dice(c);
  m.precision = metrics::precision(c);
  m.sensitivity = metrics::sensitivity(c);
  m.specificity = metrics::specificity(c);
  return m;
}

void MetricsAccumulator::add(const LabelGrid& pred, const LabelGrid& truth, std::span<const float> probs) {
  check_pair(pred, truth);
  const std::size_t n = truth.values.size();
  if (!probs.empty() && probs.size() != n * kNumClasses) {
    fail(ErrorCode::ShapeMismatch, "probabilities hold " + std::to_string(probs.size()) + " values for " +
                                       std::to_string(n) + " voxels");
  }
  if (samples_ > 0 && have_probs_ != !probs.empty()) {
    fail(ErrorCode::ShapeMismatch, "samples mix reports with and without probabilities");
  }
  for (int k = 0; k < kNumClasses; ++k) counts_[k] += confusion_counts(pred, truth, k);
  for (std::size_t i = 0; i < n; ++i) correct_ += pred.values[i] == truth.values[i];
  voxels_ += n;
  if (!probs.empty()) {
    for (int k = 0; k < kNumClasses; ++k) {
      const float* p = probs.data() + static_cast<std::size_t>(k) * n;
      double inter = 0, ps = 0, ts = 0, bce = 0;
      for (std::size_t i = 0; i < n; ++i) {
        const double y = truth.values[i] == k ? 1.0 : 0.0;
        const double pk = p[i];
        inter += pk * y;
        ps += pk;
        ts += y;
        if (k > 0) {
          const double pc = std::clamp(pk, kBceClamp, 1.0 - kBceClamp);
          bce += y * std::log(pc) + (1.0 - y) * std::log(1.0 - pc);
        }
      }
      intersection_[k] += inter;
      prob_sum_[k] += ps;
      truth_sum_[k] += ts;
      bce_sum_ -= bce;
    }
  }
  have_probs_ = !probs.empty();
  ++samples_;
}

void MetricsAccumulator::merge(const MetricsAccumulator& other) {
  if (other.samples_ == 0) return;
  if (samples_ > 0 && have_probs_ != other.have_probs_) {
    fail(ErrorCode::ShapeMismatch, "samples mix reports with and without probabilities");
  }
  for (int k = 0; k < kNumClasses; ++k) {
    counts_[k] += other.counts_[k];
    intersection_[k] += other.intersection_[k];
    prob_sum_[k] += other.prob_sum_[k];
    truth_sum_[k] += other.truth_sum_[k];
  }
  bce_sum_ += other.bce_sum_;
  voxels_ += other.voxels_;
  correct_ += other.correct_;
  samples_ += other.samples_;
  have_probs_ = other.have_probs_;
}

MetricsReport MetricsAccumulator::report() const {
  if (voxels_ == 0) fail(ErrorCode::EmptyGrid, "no voxels accumulated");
  MetricsReport r;
  r.counts = counts_;
  r.voxel_accuracy = static_cast<double>(correct_) / static_cast<double>(voxels_);
  for (int k = 0; k < kNumClasses; ++k) {
    r.per_class[k] = ClassMetrics::from_counts(counts_[k]);
    if (have_probs_) {
      const double eps = ad::kDiceEpsilon;
      r.per_class[k].soft_dice = (2.0 * intersection_[k] + eps) / (prob_sum_[k] + truth_sum_[k] + eps);
    }
  }
  constexpr double tumor = kNumClasses - 1;
  for (int k = 1; k < kNumClasses; ++k) {
    const auto& c = r.per_class[k];
    r.macro.accuracy += c.accuracy / tumor;
    r.macro.iou += c.iou / tumor;
    r.macro.dice += c.dice / tumor;
    r.macro.precision += c.precision / tumor;
    r.macro.sensitivity += c.sensitivity / tumor;
    r.macro.specificity += c.specificity / tumor;
    r.macro.soft_dice += c.soft_dice / tumor;
  }
  if (have_probs_) {
    r.bce_loss = bce_sum_ / (tumor * static_cast<double>(voxels_));
    r.dice_loss = 1.0 - r.macro.soft_dice;
  }
  return r;
}

MetricsReport report(const LabelGrid& pred, const LabelGrid& truth, std::span<const float> probs) {
  MetricsAccumulator acc;
  acc.add(pred, truth, probs);
  return acc.report();
}

namespace {

constexpr std::array<std::string_view, 7> kFieldNames{"accuracy", "iou", "dice", "precision",
                                                      "sensitivity", "specificity", "soft_dice"};

std::array<double, 7> fields(const ClassMetrics& m) {
  return {m.accuracy, m.iou, m.dice, m.precision, m.sensitivity, m.specificity, m.soft_dice};
}

std::string num(double v) {
  std::ostringstream os;
  os << std::setprecision(17) << v;
  return os.str();
}

}  // namespace

// voxel_accuracy,bce_loss,dice_loss, then <class>_<field> for necrotic, edema, enhancing and
// macro, fields in the order accuracy,iou,dice,precision,sensitivity,specificity,soft_dice.
std::string MetricsReport::csv_header() {
  std::string h = "voxel_accuracy,bce_loss,dice_loss";
  for (int k = 1; k <= kNumClasses; ++k) {
    const std::string_view cls = k < kNumClasses ? kClassNames[k] : "macro";
    for (auto f : kFieldNames) h += "," + std::string(cls) + "_" + std::string(f);
  }
  return h;
}

std::string MetricsReport::csv_row() const {
  std::string row = num(voxel_accuracy) + "," + num(bce_loss) + "," + num(dice_loss);
  for (int k = 1; k <= kNumClasses; ++k) {
    for (double v : fields(k < kNumClasses ? per_class[k] : macro)) row += "," + num(v);
  }
  return row;
}

std::string MetricsReport::text() const {
  std::ostringstream os;
  os << std::fixed << std::setprecision(4);
  os << "voxel accuracy " << voxel_accuracy << "  bce " << bce_loss << "  dice loss " << dice_loss << "\n";
  os << std::left << std::setw(12) << "class";
  for (auto f : kFieldNames) os << std::right << std::setw(13) << f;
  os << "\n";
  for (int k = 0; k <= kNumClasses; ++k) {
    const std::string_view cls = k < kNumClasses ? kClassNames[k] : "macro";
    os << std::left << std::setw(12) << cls;
    for (double v : fields(k < kNumClasses ? per_class[k] : macro)) os << std::right << std::setw(13) << v;
    os << "\n";
  }
  return os.str();
}

}  // namespace mhaseg::metrics
