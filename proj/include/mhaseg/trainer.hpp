// SPDX-License-Identifier: Apache-2.0
#pragma once

#include <cstddef>
#include <cstdint>
#include <functional>
#include <limits>
#include <span>
#include <string>
#include <utility>
#include <vector>

#include "mhaseg/autodiff/adam.hpp"
#include "mhaseg/autodiff/checkpoint.hpp"
#include "mhaseg/metrics.hpp"
#include "mhaseg/model.hpp"
#include "mhaseg/preprocess.hpp"

namespace mhaseg::trainer {

using preprocess::Sample;
using Model = model::UNet3DMHA<float>;

struct TrainConfig {
  double learning_rate = 1e-3;
  std::size_t batch_size = 2;
  std::size_t epochs = 25;
  std::size_t patience = 5;
  double val_fraction = 0.2;
  std::uint64_t seed = 0;
  /// Weight of the soft-Dice term: loss = CE + loss_mix * dice_loss.
  double loss_mix = 1.0;
  /// Stop once this many optimizer steps have run; 0 means no limit.
  std::size_t max_steps = 0;
  /// When false, EpochLog::wall_seconds is logged as 0 so run logs are reproducible byte for byte.
  bool record_wall_time = false;

  void validate() const;
  bool operator==(const TrainConfig&) const = default;
};

struct EpochLog {
  std::size_t epoch = 0;  // 1-based
  double train_loss = 0;
  double train_acc = 0;
  double val_loss = 0;
  double val_acc = 0;
  double dice_necrotic = 0;
  double dice_edema = 0;
  double dice_enhancing = 0;
  double wall_seconds = 0;
  /// Macro soft Dice of the training forwards; kept in memory, not in the CSV.
  double train_soft_dice = 0;
};

struct RunLog {
  TrainConfig config;
  model::ModelConfig model;
  std::vector<EpochLog> epochs;
  std::size_t best_epoch = 0;
  bool stopped_early = false;
  std::size_t steps = 0;
};

/// Deterministic shuffled split; the validation side gets round(n * fraction) samples,
/// clamped so both sides are nonempty. Throws TooFewSamples below two samples.
std::pair<std::vector<std::size_t>, std::vector<std::size_t>> split_indices(std::size_t count, double val_fraction,
                                                                            std::uint64_t seed);
std::pair<std::vector<Sample>, std::vector<Sample>> split_dataset(std::vector<Sample> samples, double val_fraction,
                                                                  std::uint64_t seed);

/// Patience counter over a validation-loss sequence. Only strict decreases count as improvement.
class EarlyStopping {
 public:
  explicit EarlyStopping(std::size_t patience) : patience_(patience) {}
  /// Returns true when training should stop after this epoch.
  bool update(std::size_t epoch, double val_loss);
  std::size_t best_epoch() const { return best_epoch_; }
  double best_loss() const { return best_loss_; }
  /// True when `epoch` set a new best in the last update.
  bool improved() const { return improved_; }

 private:
  std::size_t patience_;
  std::size_t best_epoch_ = 0;
  double best_loss_ = std::numeric_limits<double>::infinity();
  std::size_t since_best_ = 0;
  bool improved_ = false;
};

/// CE + mix * soft-Dice for one sample, with the prediction and probabilities it produced.
struct SampleOutcome {
  double loss = 0;
  LabelGrid prediction;
  std::vector<float> probs;
};

struct Evaluation {
  metrics::MetricsReport report;
  double loss = 0;  // mean per-sample combined loss
};

/// Inference pass over `samples`; counts and overlap sums aggregate before any ratio is taken.
Evaluation evaluate_with_loss(const Model& model, std::span<const Sample> samples, double loss_mix = 1.0);
metrics::MetricsReport evaluate(const Model& model, std::span<const Sample> samples);

/// Forward of one sample without recording.
SampleOutcome infer(const Model& model, const Sample& sample, double loss_mix = 1.0);

class Trainer {
 public:
  Trainer(Model& model, TrainConfig config);

  /// One optimizer step over `batch`. Every sample runs on its own tape; the gradients of
  /// loss / batch_size accumulate before a single Adam update.
  std::vector<SampleOutcome> step(std::span<const Sample* const> batch);

  /// Epoch loop with shuffling, validation, best-checkpoint retention and early stopping.
  /// `on_epoch` is called after each epoch is logged.
  RunLog fit(std::span<const Sample> train, std::span<const Sample> val,
             const std::function<void(const EpochLog&)>& on_epoch = {});

  /// Parameters at the best validation epoch of the last `fit`.
  const std::vector<ad::NamedArray>& best_parameters() const { return best_; }
  std::size_t steps() const { return state_.step; }

 private:
  Model& model_;
  TrainConfig config_;
  ad::AdamState<float> state_;
  std::vector<ad::Tensor<float>> params_;
  std::vector<ad::NamedArray> best_;
};

struct GridCell {
  double learning_rate = 0;
  std::size_t batch_size = 0;
  RunLog log;
  std::vector<ad::NamedArray> best_parameters;
};

/// One freshly built model per (lr, batch) cell, each seeded from `base.seed`.
std::vector<GridCell> run_grid(const std::function<Model()>& build, std::span<const Sample> train,
                               std::span<const Sample> val, std::span<const double> learning_rates,
                               std::span<const std::size_t> batch_sizes, const TrainConfig& base);

/// lr,batch,train_acc,val_acc,train_loss,val_loss at each cell's best epoch.
std::string grid_summary(std::span<const GridCell> cells);

inline constexpr const char* kRunLogHeader =
    "epoch,train_loss,train_acc,val_loss,val_acc,dice_necrotic,dice_edema,dice_enhancing,wall_seconds";

std::string runlog_csv(const RunLog& log);
/// Parses the CSV written by `runlog_csv`; MalformedInput on any deviation, including no rows.
std::vector<EpochLog> parse_runlog_csv(const std::string& text);
std::string run_summary(const RunLog& log);

}  // namespace mhaseg::trainer
