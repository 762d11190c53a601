// SPDX-License-Identifier: Apache-2.0
#include "mhaseg/cli.hpp"

#include <atomic>
#include <charconv>
#include <chrono>
#include <ctime>
#include <iostream>
#include <mutex>
#include <optional>
#include <thread>

#include <CLI11.hpp>
#include <json.hpp>

#include "mhaseg/autodiff/checkpoint.hpp"
#include "mhaseg/config.hpp"
#include "mhaseg/error.hpp"
#include "mhaseg/io_util.hpp"
#include "mhaseg/metrics.hpp"
#include "mhaseg/model.hpp"
#include "mhaseg/preprocess.hpp"
#include "mhaseg/render.hpp"
#include "mhaseg/synth.hpp"
#include "mhaseg/trainer.hpp"
#include "mhaseg/version.hpp"

namespace mhaseg::cli {

namespace fs = std::filesystem;

std::string manifest_json(const RunManifest& m) {
  nlohmann::ordered_json j;
  j["command"] = m.command;
  j["config_path"] = m.config_path;
  j["inputs"] = m.inputs;
  j["output"] = m.output;
  j["seed"] = m.seed;
  j["tool_version"] = kVersion;
  j["started_at"] = m.started_at;
  j["finished_at"] = m.finished_at;
  j["details"] = m.details;
  return j.dump(2) + "\n";
}

void write_manifest(const fs::path& dir, const RunManifest& manifest) {
  io::write_text(dir / "run.json", manifest_json(manifest));
}

namespace {

std::string utc_now() {
  const std::time_t t = std::chrono::system_clock::to_time_t(std::chrono::system_clock::now());
  std::tm tm{};
  gmtime_r(&t, &tm);
  char buf[32];
  std::strftime(buf, sizeof buf, "%Y-%m-%dT%H:%M:%SZ", &tm);
  return buf;
}

std::string num(double v) {
  char buf[32];
  const auto r = std::to_chars(buf, buf + sizeof buf, v);
  return {buf, r.ptr};
}

double seconds_since(std::chrono::steady_clock::time_point t0) {
  return std::chrono::duration<double>(std::chrono::steady_clock::now() - t0).count();
}

RunManifest begin(std::string command, const fs::path& out) {
  RunManifest m;
  m.command = std::move(command);
  m.output = out.string();
  m.started_at = utc_now();
  return m;
}

void finish(RunManifest& m, const fs::path& dir) {
  m.finished_at = utc_now();
  write_manifest(dir, m);
}

// ---------------------------------------------------------------- preprocess

struct PreprocessArgs {
  std::string in, out, crop, config;
  std::optional<double> ratio;
  bool dev = false;
  unsigned threads = 1;
};

int cmd_preprocess(const PreprocessArgs& a) {
  RunManifest man = begin("preprocess", a.out);
  man.inputs = {a.in};
  man.config_path = a.config;
  config::RunConfig cfg = a.config.empty() ? config::RunConfig{} : config::load(a.config);
  auto& pc = cfg.preprocess;
  if (!a.crop.empty()) pc.crop_target = config::parse_extent(a.crop);
  if (a.ratio) pc.label_ratio_threshold = *a.ratio;
  if (a.dev) pc.crop_multiple = 16;
  pc.validate();

  std::vector<std::string> incomplete;
  const auto subjects = preprocess::discover_subjects(a.in, &incomplete);
  if (subjects.empty() && incomplete.empty()) std::cerr << "warning: no subjects found under " << a.in << "\n";

  struct Outcome {
    bool accepted = false;
    std::string error;
    double ratio = 0;
  };
  std::vector<Outcome> outcomes(subjects.size());
  std::atomic<std::size_t> next{0};
  auto worker = [&] {
    for (std::size_t i = next++; i < subjects.size(); i = next++) {
      try {
        const auto r = preprocess::preprocess_subject(subjects[i], pc);
        outcomes[i].ratio = r.label_ratio;
        if (r.sample) {
          preprocess::save_sample(*r.sample, a.out);
          outcomes[i].accepted = true;
        }
      } catch (const std::exception& e) {
        outcomes[i].error = e.what();
      }
    }
  };
  const unsigned n_threads = std::max(1U, std::min<unsigned>(a.threads, static_cast<unsigned>(subjects.size())));
  std::vector<std::thread> pool;
  for (unsigned t = 1; t < n_threads; ++t) pool.emplace_back(worker);
  worker();
  for (auto& t : pool) t.join();

  std::vector<std::string> accepted;
  std::size_t errors = incomplete.size();
  for (std::size_t i = 0; i < subjects.size(); ++i) {
    const auto& id = subjects[i].subject_id;
    const auto& o = outcomes[i];
    if (!o.error.empty()) {
      std::cerr << "error " << id << ": " << o.error << "\n";
      ++errors;
    } else if (o.accepted) {
      std::cout << "accept " << id << " ratio=" << num(o.ratio) << "\n";
      accepted.push_back(id);
    } else {
      std::cout << "skip " << id << " ratio=" << num(o.ratio) << " threshold=" << num(pc.label_ratio_threshold)
                << "\n";
    }
  }
  for (const auto& id : incomplete) std::cerr << "error " << id << ": missing a modality or mask file\n";
  preprocess::write_manifest(a.out, accepted);
  man.details["subjects"] = std::to_string(subjects.size() + incomplete.size());
  man.details["accepted"] = std::to_string(accepted.size());
  man.details["errors"] = std::to_string(errors);
  finish(man, a.out);
  return errors ? kExitInput : kExitOk;
}

// ---------------------------------------------------------------- synth-data

struct SynthArgs {
  std::string out, extent = "64";
  std::size_t subjects = 2, tumors = 1;
  std::uint64_t seed = 0;
  double ratio = 0.05;
  bool dev = false;
};

int cmd_synth(const SynthArgs& a) {
  RunManifest man = begin("synth-data", a.out);
  man.seed = a.seed;
  synth::SynthConfig sc;
  sc.extent = config::parse_extent(a.extent);
  const std::size_t multiple = a.dev ? 32 : 64;
  for (auto e : {sc.extent.depth, sc.extent.height, sc.extent.width}) {
    if (e % multiple != 0) {
      fail(ErrorCode::BadConfig, "extent " + sc.extent.str() + " must be a multiple of " + std::to_string(multiple));
    }
  }
  sc.subjects = a.subjects;
  sc.seed = a.seed;
  sc.tumor_ratio = a.ratio;
  sc.tumors = a.tumors;
  const auto ids = synth::write_dataset(a.out, sc);
  for (const auto& id : ids) std::cout << "wrote " << id << "\n";
  man.details["subjects"] = std::to_string(ids.size());
  man.details["extent"] = config::format_extent(sc.extent);
  man.details["tumor_ratio"] = num(sc.tumor_ratio);
  finish(man, a.out);
  return kExitOk;
}

// ---------------------------------------------------------------- model loading

trainer::Model load_model(const fs::path& ckpt) {
  const fs::path cfg_path = ckpt.parent_path() / "model.cfg";
  if (!fs::exists(cfg_path)) fail(ErrorCode::IoFailure, "missing " + cfg_path.string() + " beside checkpoint");
  const auto cfg = config::load(cfg_path);
  if (!cfg.input_extent) fail(ErrorCode::BadConfig, cfg_path.string() + " lacks model.input_extent");
  auto model = trainer::Model::build(cfg.model, 0);
  const auto arrays = ad::load_checkpoint(ckpt);
  model.import_parameters(arrays);
  return model;
}

std::vector<preprocess::Sample> load_dataset(const fs::path& root) {
  std::vector<preprocess::Sample> samples;
  for (const auto& id : preprocess::read_manifest(root)) samples.push_back(preprocess::load_sample(root, id));
  if (samples.empty()) fail(ErrorCode::TooFewSamples, "no samples listed in " + (root / "manifest.txt").string());
  return samples;
}

// ---------------------------------------------------------------- train

struct TrainArgs {
  std::string data, config, out;
  std::vector<std::string> set;
};

int cmd_train(const TrainArgs& a) {
  const auto t0 = std::chrono::steady_clock::now();
  RunManifest man = begin("train", a.out);
  man.inputs = {a.data};
  man.config_path = a.config;
  config::RunConfig cfg = a.config.empty() ? config::RunConfig{} : config::load(a.config);
  for (const auto& s : a.set) config::apply_assignment(cfg, s);
  man.seed = cfg.train.seed;

  auto samples = load_dataset(a.data);
  if (!cfg.input_extent) cfg.input_extent = samples.front().image.extent;
  cfg.model.input_extent = *cfg.input_extent;
  cfg.model.validate();
  cfg.train.validate();
  auto [train, val] = trainer::split_dataset(std::move(samples), cfg.train.val_fraction, cfg.train.seed);
  std::cout << "train " << train.size() << " samples, validate " << val.size() << "\n";

  const bool grid = cfg.learning_rates.size() * cfg.batch_sizes.size() > 1;
  std::vector<trainer::GridCell> cells;
  for (double lr : cfg.learning_rates) {
    for (std::size_t bs : cfg.batch_sizes) {
      const auto cell_start = std::chrono::steady_clock::now();
      config::RunConfig cell_cfg = cfg;
      cell_cfg.learning_rates = {lr};
      cell_cfg.batch_sizes = {bs};
      cell_cfg.train.learning_rate = lr;
      cell_cfg.train.batch_size = bs;
      const fs::path dir = grid ? fs::path(a.out) / ("lr" + num(lr) + "_bs" + std::to_string(bs)) : fs::path(a.out);
      RunManifest cell_man = begin("train", dir);
      cell_man.inputs = man.inputs;
      cell_man.config_path = a.config;
      cell_man.seed = cfg.train.seed;

      auto model = trainer::Model::build(cell_cfg.model, cell_cfg.train.seed);
      trainer::Trainer tr(model, cell_cfg.train);
      auto log = tr.fit(train, val, [&](const trainer::EpochLog& e) {
        std::cout << "lr=" << num(lr) << " bs=" << bs << " epoch " << e.epoch << " train_loss " << num(e.train_loss)
                  << " val_loss " << num(e.val_loss) << " val_acc " << num(e.val_acc) << "\n";
      });
      io::write_text(dir / "runlog.csv", trainer::runlog_csv(log));
      io::write_text(dir / "summary.txt", trainer::run_summary(log));
      ad::save_checkpoint(dir / "best.ckpt", tr.best_parameters());
      io::write_text(dir / "model.cfg", config::format(cell_cfg));
      if (grid) {
        cell_man.details["wall_seconds"] = num(seconds_since(cell_start));
        cell_man.details["best_epoch"] = std::to_string(log.best_epoch);
        finish(cell_man, dir);
      } else {
        man.details["best_epoch"] = std::to_string(log.best_epoch);
      }
      cells.push_back({lr, bs, std::move(log), {}});
    }
  }
  if (grid) io::write_text(fs::path(a.out) / "grid_summary.csv", trainer::grid_summary(cells));
  man.details["cells"] = std::to_string(cells.size());
  man.details["wall_seconds"] = num(seconds_since(t0));
  finish(man, a.out);
  return kExitOk;
}

// ---------------------------------------------------------------- evaluate

struct EvaluateArgs {
  std::string data, ckpt, pred, out;
};

void write_report(const fs::path& out, const metrics::MetricsReport& r) {
  io::write_text(out / "metrics.csv", metrics::MetricsReport::csv_header() + "\n" + r.csv_row() + "\n");
  io::write_text(out / "metrics.txt", r.text());
  std::cout << r.text();
}

int cmd_evaluate(const EvaluateArgs& a) {
  RunManifest man = begin("evaluate", a.out);
  man.inputs = {a.data, a.ckpt.empty() ? a.pred : a.ckpt};
  metrics::MetricsReport report;
  if (!a.ckpt.empty()) {
    const auto model = load_model(a.ckpt);
    const auto samples = load_dataset(a.data);
    report = trainer::evaluate(model, samples);
    man.details["samples"] = std::to_string(samples.size());
  } else {
    if (!fs::is_directory(a.pred)) fail(ErrorCode::IoFailure, "prediction root " + a.pred + " is not a directory");
    std::vector<fs::path> dirs;
    for (const auto& entry : fs::directory_iterator(a.pred)) {
      if (entry.is_directory() && fs::exists(entry.path() / "labels.smp")) dirs.push_back(entry.path());
    }
    std::sort(dirs.begin(), dirs.end());
    if (dirs.empty()) fail(ErrorCode::IoFailure, "no predictions under " + a.pred);
    metrics::MetricsAccumulator acc;
    for (const auto& d : dirs) {
      const std::string id = d.filename().string();
      const auto truth = preprocess::label_grid_from_smp(preprocess::read_smp(fs::path(a.data) / id / "mask.smp"));
      const auto pred = preprocess::label_grid_from_smp(preprocess::read_smp(d / "labels.smp"));
      std::vector<float> probs;
      if (fs::exists(d / "probs.smp")) probs = preprocess::float_grid_from_smp(preprocess::read_smp(d / "probs.smp")).values;
      acc.add(pred, truth, probs);
    }
    report = acc.report();
    man.details["samples"] = std::to_string(dirs.size());
  }
  write_report(a.out, report);
  finish(man, a.out);
  return kExitOk;
}

// ---------------------------------------------------------------- predict

struct PredictArgs {
  std::string in, ckpt, out;
};

int cmd_predict(const PredictArgs& a) {
  RunManifest man = begin("predict", a.out);
  man.inputs = {a.in, a.ckpt};
  const fs::path in = fs::path(a.in).lexically_normal();
  const std::string id = (in.has_filename() ? in : in.parent_path()).filename().string();
  const auto model = load_model(a.ckpt);
  preprocess::Sample sample;
  sample.subject_id = id;
  sample.image = preprocess::float_grid_from_smp(preprocess::read_smp(in / "image.smp"));
  sample.mask = LabelGrid(sample.image.extent);  // placeholder target; the prediction ignores it
  const auto outcome = trainer::infer(model, sample);

  const fs::path dir = fs::path(a.out) / id;
  preprocess::write_smp(dir / "labels.smp", preprocess::to_smp(outcome.prediction));
  FloatGrid probs(sample.image.extent, model.config().num_classes);
  probs.values = outcome.probs;
  preprocess::write_smp(dir / "probs.smp", preprocess::to_smp(probs));
  const std::size_t flair = 2;
  const std::size_t slices = render::write_overlays(dir / "overlay", sample.image, outcome.prediction,
                                                    std::min(flair, sample.image.channels - 1));
  std::cout << "predicted " << id << ", " << slices << " overlay slices\n";
  man.details["slices"] = std::to_string(slices);
  finish(man, a.out);
  return kExitOk;
}

// ---------------------------------------------------------------- plot

struct PlotArgs {
  std::string runlog, out;
};

int cmd_plot(const PlotArgs& a) {
  RunManifest man = begin("plot", a.out);
  man.inputs = {a.runlog};
  const auto rows = trainer::parse_runlog_csv(io::read_text(a.runlog));
  std::vector<double> ta, va, tl, vl;
  for (const auto& r : rows) {
    ta.push_back(r.train_acc);
    va.push_back(r.val_acc);
    tl.push_back(r.train_loss);
    vl.push_back(r.val_loss);
  }
  const std::vector<render::Series> acc{{"Training Accuracy", ta, "#1f77b4"}, {"Validation Accuracy", va, "#ff7f0e"}};
  const std::vector<render::Series> loss{{"Training Loss", tl, "#1f77b4"}, {"Validation Loss", vl, "#ff7f0e"}};
  io::write_text(fs::path(a.out) / "accuracy.svg", render::line_chart_svg("Accuracy", "Accuracy", acc));
  io::write_text(fs::path(a.out) / "loss.svg", render::line_chart_svg("Loss", "Loss", loss));
  man.details["epochs"] = std::to_string(rows.size());
  finish(man, a.out);
  return kExitOk;
}

int guarded(const std::function<int()>& body) {
  try {
    return body();
  } catch (const Error& e) {
    std::cerr << "error: " << e.what() << "\n";
    return e.code() == ErrorCode::NonFiniteLoss ? kExitNumeric : kExitInput;
  } catch (const std::exception& e) {
    std::cerr << "error: " << e.what() << "\n";
    return kExitInput;
  }
}

}  // namespace

int run(int argc, const char* const* argv) {
  CLI::App app{"Volumetric brain-tumour segmentation with a multihead-attention 3D U-Net", "mhaseg"};
  app.require_subcommand(1);
  app.set_version_flag("--version", kVersion);

  PreprocessArgs pa;
  auto* pre = app.add_subcommand("preprocess", "Normalize, stack, crop and filter a BraTS-layout dataset");
  pre->add_option("--in", pa.in, "Input root with <id>/<id>_{t2,t1ce,flair,seg}.nii[.gz]")->required();
  pre->add_option("--out", pa.out, "Output root for SMP1 samples")->required();
  pre->add_option("--crop", pa.crop, "Crop target D,H,W (or a single extent)");
  pre->add_option("--ratio", pa.ratio, "Minimum nonzero-label ratio (exclusive)");
  pre->add_option("--config", pa.config, "key=value configuration file");
  pre->add_flag("--dev", pa.dev, "Allow crop extents that are multiples of 16");
  pre->add_option("--threads", pa.threads, "Worker threads")->check(CLI::PositiveNumber);

  SynthArgs sa;
  auto* syn = app.add_subcommand("synth-data", "Write synthetic subjects in the BraTS layout");
  syn->add_option("--out", sa.out, "Output root")->required();
  syn->add_option("--subjects", sa.subjects, "Number of subjects")->check(CLI::PositiveNumber);
  syn->add_option("--extent", sa.extent, "Volume extent E or D,H,W");
  syn->add_option("--seed", sa.seed, "Random seed");
  syn->add_option("--ratio", sa.ratio, "Target nonzero-label fraction");
  syn->add_option("--tumors", sa.tumors, "Tumours per subject")->check(CLI::PositiveNumber);
  syn->add_flag("--dev", sa.dev, "Allow extents that are multiples of 32");

  TrainArgs ta;
  auto* trn = app.add_subcommand("train", "Train on preprocessed samples");
  trn->add_option("--data", ta.data, "Preprocessed sample root")->required();
  trn->add_option("--config", ta.config, "key=value configuration file");
  trn->add_option("--out", ta.out, "Run output directory")->required();
  trn->add_option("--set", ta.set, "Override a configuration key (key=value), repeatable");

  EvaluateArgs ea;
  auto* ev = app.add_subcommand("evaluate", "Metrics for a checkpoint or saved predictions");
  ev->add_option("--data", ea.data, "Preprocessed sample root (ground truth)")->required();
  auto* ck = ev->add_option("--ckpt", ea.ckpt, "Checkpoint; model.cfg must sit beside it");
  auto* pr = ev->add_option("--pred", ea.pred, "Prediction root written by predict");
  ck->excludes(pr);
  ev->add_option("--out", ea.out, "Report directory")->required();

  PredictArgs pd;
  auto* pre_d = app.add_subcommand("predict", "Label one sample and export slice overlays");
  pre_d->add_option("--in", pd.in, "Sample directory holding image.smp")->required();
  pre_d->add_option("--ckpt", pd.ckpt, "Checkpoint; model.cfg must sit beside it")->required();
  pre_d->add_option("--out", pd.out, "Output root")->required();

  PlotArgs pl;
  auto* plt = app.add_subcommand("plot", "Accuracy and loss curves from a run log");
  plt->add_option("--runlog", pl.runlog, "runlog.csv written by train")->required();
  plt->add_option("--out", pl.out, "Output directory")->required();

  try {
    app.parse(argc, argv);
  } catch (const CLI::ParseError& e) {
    const int code = app.exit(e);
    return code == 0 ? kExitOk : kExitInput;
  }

  if (*pre) return guarded([&] { return cmd_preprocess(pa); });
  if (*syn) return guarded([&] { return cmd_synth(sa); });
  if (*trn) return guarded([&] { return cmd_train(ta); });
  if (*ev) {
    if (ea.ckpt.empty() == ea.pred.empty()) {
      std::cerr << "error: evaluate needs exactly one of --ckpt or --pred\n";
      return kExitInput;
    }
    return guarded([&] { return cmd_evaluate(ea); });
  }
  if (*pre_d) return guarded([&] { return cmd_predict(pd); });
  if (*plt) return guarded([&] { return cmd_plot(pl); });
  return kExitInput;
}

int run(const std::vector<std::string>& args) {
  std::vector<const char*> argv;
  argv.reserve(args.size() + 1);
  argv.push_back("mhaseg");
  for (const auto& a : args) argv.push_back(a.c_str());
  return run(static_cast<int>(argv.size()), argv.data());
}

}  // namespace mhaseg::cli
