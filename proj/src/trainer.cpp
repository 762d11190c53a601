// SPDX-License-Identifier: Apache-2.0
#include "mhaseg/trainer.hpp"

#include <algorithm>
#include <charconv>
#include <chrono>
#include <cmath>
#include <numeric>
#include <random>
#include <sstream>

#include "mhaseg/autodiff/ops.hpp"
#include "mhaseg/error.hpp"

namespace mhaseg::trainer {

void TrainConfig::validate() const {
  auto bad = [](const std::string& why) { fail(ErrorCode::BadConfig, why); };
  if (!(learning_rate >= 0) || !std::isfinite(learning_rate)) bad("learning rate must be finite and >= 0");
  if (batch_size < 1) bad("batch size must be at least 1");
  if (epochs < 1) bad("epochs must be at least 1");
  if (patience < 1) bad("patience must be at least 1");
  if (!(val_fraction > 0 && val_fraction < 1)) bad("val_fraction must lie in (0, 1)");
  if (!(loss_mix >= 0) || !std::isfinite(loss_mix)) bad("loss_mix must be finite and >= 0");
}

std::pair<std::vector<std::size_t>, std::vector<std::size_t>> split_indices(std::size_t count, double val_fraction,
                                                                            std::uint64_t seed) {
  if (count < 2) fail(ErrorCode::TooFewSamples, "need at least 2 samples to split, got " + std::to_string(count));
  if (!(val_fraction > 0 && val_fraction < 1)) fail(ErrorCode::BadConfig, "val_fraction must lie in (0, 1)");
  std::vector<std::size_t> order(count);
  std::iota(order.begin(), order.end(), 0);
  std::mt19937_64 rng(seed);
  std::shuffle(order.begin(), order.end(), rng);
  const auto want = static_cast<std::size_t>(std::llround(static_cast<double>(count) * val_fraction));
  const std::size_t n_val = std::clamp<std::size_t>(want, 1, count - 1);
  std::vector<std::size_t> val(order.begin(), order.begin() + static_cast<std::ptrdiff_t>(n_val));
  std::vector<std::size_t> train(order.begin() + static_cast<std::ptrdiff_t>(n_val), order.end());
  std::sort(train.begin(), train.end());
  std::sort(val.begin(), val.end());
  return {std::move(train), std::move(val)};
}

std::pair<std::vector<Sample>, std::vector<Sample>> split_dataset(std::vector<Sample> samples, double val_fraction,
                                                                  std::uint64_t seed) {
  auto [ti, vi] = split_indices(samples.size(), val_fraction, seed);
  std::pair<std::vector<Sample>, std::vector<Sample>> out;
  for (auto i : ti) out.first.push_back(std::move(samples[i]));
  for (auto i : vi) out.second.push_back(std::move(samples[i]));
  return out;
}

bool EarlyStopping::update(std::size_t epoch, double val_loss) {
  improved_ = val_loss < best_loss_;
  if (improved_) {
    best_loss_ = val_loss;
    best_epoch_ = epoch;
    since_best_ = 0;
  } else {
    ++since_best_;
  }
  return since_best_ >= patience_;
}

namespace {

using ad::Tape;
using ad::Tensor;

Tensor<float> combined_loss(Tape<float>& tape, const Tensor<float>& probs, const Tensor<float>& target, double mix) {
  Tensor<float> loss = ad::categorical_cross_entropy(tape, probs, target);
  if (mix != 0) {
    loss = ad::add(tape, loss, ad::scale(tape, ad::dice_loss(tape, probs, target), static_cast<float>(mix)));
  }
  return loss;
}

void check_extent(const Model& model, const Sample& s) {
  const auto& c = model.config();
  if (s.image.channels != c.in_channels || s.image.extent != c.input_extent || s.mask.extent != c.input_extent) {
    fail(ErrorCode::ShapeMismatch, "sample " + s.subject_id + " is " + std::to_string(s.image.channels) + "x" +
                                       s.image.extent.str() + ", model expects " + std::to_string(c.in_channels) +
                                       "x" + c.input_extent.str());
  }
}

void check_finite(double loss, const std::string& where) {
  if (!std::isfinite(loss)) fail(ErrorCode::NonFiniteLoss, "loss is " + std::to_string(loss) + " at " + where);
}

// Diverged weights surface as non-finite logits inside the softmax; report them as a loss failure.
Tensor<float> forward_checked(const Model& model, Tape<float>& tape, const Sample& s) {
  try {
    return model.forward(tape, model::to_tensor<float>(s.image));
  } catch (const Error& e) {
    if (e.code() != ErrorCode::NonFiniteInput) throw;
    fail(ErrorCode::NonFiniteLoss, "non-finite activations for " + s.subject_id + ": " + e.what());
  }
}

SampleOutcome outcome_of(const Tensor<float>& probs, double loss) {
  SampleOutcome o;
  o.loss = loss;
  o.prediction = model::predict_labels(probs);
  o.probs.assign(probs.data().begin(), probs.data().end());
  return o;
}

}  // namespace

SampleOutcome infer(const Model& model, const Sample& sample, double loss_mix) {
  check_extent(model, sample);
  Tape<float> tape(false);
  const auto probs = forward_checked(model, tape, sample);
  const auto target = ad::one_hot<float>(sample.mask, model.config().num_classes);
  return outcome_of(probs, combined_loss(tape, probs, target, loss_mix).item());
}

Evaluation evaluate_with_loss(const Model& model, std::span<const Sample> samples, double loss_mix) {
  if (samples.empty()) fail(ErrorCode::TooFewSamples, "evaluate needs at least one sample");
  metrics::MetricsAccumulator acc;
  double loss = 0;
  for (const auto& s : samples) {
    const SampleOutcome o = infer(model, s, loss_mix);
    check_finite(o.loss, "evaluation of " + s.subject_id);
    acc.add(o.prediction, s.mask, o.probs);
    loss += o.loss;
  }
  return {acc.report(), loss / static_cast<double>(samples.size())};
}

metrics::MetricsReport evaluate(const Model& model, std::span<const Sample> samples) {
  return evaluate_with_loss(model, samples).report;
}

Trainer::Trainer(Model& model, TrainConfig config) : model_(model), config_(config), params_(model.parameters().tensors()) {
  config_.validate();
  state_.options.learning_rate = config_.learning_rate;
}

std::vector<SampleOutcome> Trainer::step(std::span<const Sample* const> batch) {
  if (batch.empty()) fail(ErrorCode::TooFewSamples, "empty batch");
  model_.parameters().zero_grad();
  const auto inv = static_cast<float>(1.0 / static_cast<double>(batch.size()));
  std::vector<SampleOutcome> out;
  out.reserve(batch.size());
  for (const Sample* s : batch) {
    check_extent(model_, *s);
    Tape<float> tape;
    const auto probs = forward_checked(model_, tape, *s);
    const auto target = ad::one_hot<float>(s->mask, model_.config().num_classes);
    const auto loss = combined_loss(tape, probs, target, config_.loss_mix);
    check_finite(loss.item(), "step " + std::to_string(state_.step + 1) + ", sample " + s->subject_id);
    tape.backward(ad::scale(tape, loss, inv));
    out.push_back(outcome_of(probs, loss.item()));
  }
  ad::adam_step(std::span<Tensor<float>>(params_), state_);
  return out;
}

RunLog Trainer::fit(std::span<const Sample> train, std::span<const Sample> val,
                    const std::function<void(const EpochLog&)>& on_epoch) {
  if (train.empty() || val.empty()) fail(ErrorCode::TooFewSamples, "fit needs nonempty train and validation sets");
  RunLog log;
  log.config = config_;
  log.model = model_.config();
  EarlyStopping stopper(config_.patience);
  std::mt19937_64 rng(config_.seed ^ 0x9e3779b97f4a7c15ULL);
  best_ = model_.export_parameters();
  bool out_of_steps = false;

  for (std::size_t epoch = 1; epoch <= config_.epochs && !out_of_steps; ++epoch) {
    const auto start = std::chrono::steady_clock::now();
    std::vector<std::size_t> order(train.size());
    std::iota(order.begin(), order.end(), 0);
    std::shuffle(order.begin(), order.end(), rng);

    // Per-sample slots, reduced in sample order so the epoch totals do not depend on the shuffle.
    std::vector<double> losses(train.size(), 0);
    std::vector<metrics::MetricsAccumulator> seen(train.size());
    for (std::size_t b = 0; b < order.size() && !out_of_steps; b += config_.batch_size) {
      const std::size_t end = std::min(order.size(), b + config_.batch_size);
      std::vector<const Sample*> batch;
      for (std::size_t i = b; i < end; ++i) batch.push_back(&train[order[i]]);
      std::vector<SampleOutcome> outcomes;
      try {
        outcomes = step(batch);
      } catch (const Error& e) {
        if (e.code() != ErrorCode::NonFiniteLoss) throw;
        fail(ErrorCode::NonFiniteLoss, "epoch " + std::to_string(epoch) + ": " + e.what());
      }
      for (std::size_t i = b; i < end; ++i) {
        const auto& o = outcomes[i - b];
        losses[order[i]] = o.loss;
        seen[order[i]].add(o.prediction, train[order[i]].mask, o.probs);
      }
      out_of_steps = config_.max_steps != 0 && state_.step >= config_.max_steps;
    }

    metrics::MetricsAccumulator train_acc;
    double train_loss = 0;
    std::size_t count = 0;
    for (std::size_t i = 0; i < train.size(); ++i) {
      if (seen[i].samples() == 0) continue;
      train_acc.merge(seen[i]);
      train_loss += losses[i];
      ++count;
    }
    const auto tr = train_acc.report();
    Evaluation ev;
    try {
      ev = evaluate_with_loss(model_, val, config_.loss_mix);
    } catch (const Error& e) {
      if (e.code() != ErrorCode::NonFiniteLoss) throw;
      fail(ErrorCode::NonFiniteLoss, "epoch " + std::to_string(epoch) + ": " + e.what());
    }

    EpochLog row;
    row.epoch = epoch;
    row.train_loss = train_loss / static_cast<double>(count);
    row.train_acc = tr.voxel_accuracy;
    row.train_soft_dice = tr.macro.soft_dice;
    row.val_loss = ev.loss;
    row.val_acc = ev.report.voxel_accuracy;
    row.dice_necrotic = ev.report.per_class[1].dice;
    row.dice_edema = ev.report.per_class[2].dice;
    row.dice_enhancing = ev.report.per_class[3].dice;
    if (config_.record_wall_time) {
      row.wall_seconds = std::chrono::duration<double>(std::chrono::steady_clock::now() - start).count();
    }
    log.epochs.push_back(row);

    const bool stop = stopper.update(epoch, row.val_loss);
    if (stopper.improved()) best_ = model_.export_parameters();
    if (on_epoch) on_epoch(row);
    if (stop) {
      log.stopped_early = true;
      break;
    }
  }
  log.best_epoch = stopper.best_epoch();
  log.steps = state_.step;
  return log;
}

std::vector<GridCell> run_grid(const std::function<Model()>& build, std::span<const Sample> train,
                               std::span<const Sample> val, std::span<const double> learning_rates,
                               std::span<const std::size_t> batch_sizes, const TrainConfig& base) {
  if (learning_rates.empty() || batch_sizes.empty()) fail(ErrorCode::BadConfig, "empty hyperparameter grid");
  std::vector<GridCell> cells;
  for (double lr : learning_rates) {
    for (std::size_t bs : batch_sizes) {
      TrainConfig cfg = base;
      cfg.learning_rate = lr;
      cfg.batch_size = bs;
      Model model = build();
      Trainer trainer(model, cfg);
      GridCell cell{lr, bs, trainer.fit(train, val), {}};
      cell.best_parameters = trainer.best_parameters();
      cells.push_back(std::move(cell));
    }
  }
  return cells;
}

namespace {

std::string num(double v) {
  char buf[32];
  const auto r = std::to_chars(buf, buf + sizeof buf, v);
  return {buf, r.ptr};
}

const EpochLog& best_row(const RunLog& log) {
  for (const auto& e : log.epochs) {
    if (e.epoch == log.best_epoch) return e;
  }
  fail(ErrorCode::BadConfig, "run log has no best epoch");
}

}  // namespace

std::string grid_summary(std::span<const GridCell> cells) {
  std::string out = "lr,batch,train_acc,val_acc,train_loss,val_loss\n";
  for (const auto& c : cells) {
    const auto& e = best_row(c.log);
    out += num(c.learning_rate) + "," + std::to_string(c.batch_size) + "," + num(e.train_acc) + "," +
           num(e.val_acc) + "," + num(e.train_loss) + "," + num(e.val_loss) + "\n";
  }
  return out;
}

std::string runlog_csv(const RunLog& log) {
  std::string out = std::string(kRunLogHeader) + "\n";
  for (const auto& e : log.epochs) {
    out += std::to_string(e.epoch);
    for (double v : {e.train_loss, e.train_acc, e.val_loss, e.val_acc, e.dice_necrotic, e.dice_edema,
                     e.dice_enhancing, e.wall_seconds}) {
      out += "," + num(v);
    }
    out += "\n";
  }
  return out;
}

std::vector<EpochLog> parse_runlog_csv(const std::string& text) {
  auto bad = [](const std::string& why) { fail(ErrorCode::MalformedInput, "run log: " + why); };
  std::istringstream in(text);
  std::string line;
  if (!std::getline(in, line)) bad("empty file");
  if (!line.empty() && line.back() == '\r') line.pop_back();
  if (line != kRunLogHeader) bad("unexpected header '" + line + "'");
  std::vector<EpochLog> rows;
  while (std::getline(in, line)) {
    if (!line.empty() && line.back() == '\r') line.pop_back();
    if (line.empty()) continue;
    std::vector<double> f;
    std::size_t pos = 0;
    while (pos <= line.size()) {
      const std::size_t comma = std::min(line.find(',', pos), line.size());
      double v = 0;
      const auto r = std::from_chars(line.data() + pos, line.data() + comma, v);
      if (r.ec != std::errc{} || r.ptr != line.data() + comma) bad("bad number in '" + line + "'");
      f.push_back(v);
      pos = comma + 1;
    }
    if (f.size() != 9) bad("expected 9 fields in '" + line + "'");
    if (f[0] < 1 || f[0] != std::floor(f[0])) bad("bad epoch in '" + line + "'");
    EpochLog e;
    e.epoch = static_cast<std::size_t>(f[0]);
    if (!rows.empty() && e.epoch <= rows.back().epoch) bad("epochs not increasing");
    e.train_loss = f[1];
    e.train_acc = f[2];
    e.val_loss = f[3];
    e.val_acc = f[4];
    e.dice_necrotic = f[5];
    e.dice_edema = f[6];
    e.dice_enhancing = f[7];
    e.wall_seconds = f[8];
    rows.push_back(e);
  }
  if (rows.empty()) bad("no epochs");
  return rows;
}

std::string run_summary(const RunLog& log) {
  std::ostringstream os;
  os << "epochs_run=" << log.epochs.size() << "\n"
     << "steps=" << log.steps << "\n"
     << "best_epoch=" << log.best_epoch << "\n"
     << "stopped_early=" << (log.stopped_early ? "true" : "false") << "\n";
  if (!log.epochs.empty()) {
    const auto& b = best_row(log);
    os << "best_val_loss=" << num(b.val_loss) << "\n"
       << "best_val_acc=" << num(b.val_acc) << "\n"
       << "best_dice_necrotic=" << num(b.dice_necrotic) << "\n"
       << "best_dice_edema=" << num(b.dice_edema) << "\n"
       << "best_dice_enhancing=" << num(b.dice_enhancing) << "\n"
       << "final_train_loss=" << num(log.epochs.back().train_loss) << "\n"
       << "final_train_soft_dice=" << num(log.epochs.back().train_soft_dice) << "\n";
  }
  return os.str();
}

}  // namespace mhaseg::trainer
