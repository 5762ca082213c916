// fiberseg: phantom generation, baselines, training, prediction and evaluation.

#include <CLI11.hpp>

#include <cstdio>
#include <fstream>
#include <iostream>
#include <optional>
#include <string>

#include "fiberseg/infer.hpp"
#include "fiberseg/metrics.hpp"
#include "fiberseg/model.hpp"
#include "fiberseg/phantom.hpp"
#include "fiberseg/pipeline.hpp"
#include "fiberseg/train.hpp"

namespace fs = fiberseg;

namespace {

constexpr std::uint64_t kDefaultSeed = 42;

struct PhantomArgs {
  std::string spec;
  std::string stem;
  bool lr_pair = false;
  double lr_pitch = 8.3;
  std::optional<std::uint64_t> seed;
};

int run_phantom(const PhantomArgs& a) {
  fs::PhantomSpec spec = fs::load_phantom_spec(a.spec);
  if (a.seed) spec.seed = *a.seed;
  if (!a.lr_pair) {
    const auto r = fs::generate(spec);
    fs::save_volume(r.gray, a.stem + "_gray.vxg");
    fs::save_volume(r.labels, a.stem + "_label.vxg");
    return 0;
  }
  const fs::PhantomSpec lr = fs::matching_spec(spec, a.lr_pitch);
  const auto pair = fs::generate_pair(spec, lr, spec.seed);
  fs::save_volume(pair.mr.gray, a.stem + "_gray.vxg");
  fs::save_volume(pair.mr.labels, a.stem + "_label.vxg");
  fs::save_volume(pair.lr.gray, a.stem + "_lr_gray.vxg");
  fs::save_volume(pair.lr.labels, a.stem + "_lr_label.vxg");
  return 0;
}

struct BaselineArgs {
  std::string method;
  std::string gray;
  std::string label;
  std::string train_gray;
  std::string train_label;
  std::string volume_name;
  std::string forest_out;
  double fiber_diameter_um = 13.0;
  std::uint64_t seed = kDefaultSeed;
};

int run_baseline(const BaselineArgs& a) {
  const bool needs_training = a.method == "frangi" || a.method == "rf";
  if (needs_training && (a.train_gray.empty() || a.train_label.empty())) {
    throw fs::InvalidArgument("method " + a.method + " needs --train-gray and --train-label");
  }
  const fs::Volume gray = fs::load_gray(a.gray);
  const fs::LabelVolume gt = fs::load_labels(a.label);
  const std::string volume = a.volume_name.empty() ? a.gray : a.volume_name;

  fs::Segmentation result;
  if (a.method == "otsu") {
    result = fs::segment_otsu(gray);
  } else if (a.method == "best") {
    result = fs::segment_best_threshold(gray, gt);
  } else {
    const fs::Volume tg = fs::load_gray(a.train_gray);
    const fs::LabelVolume tl = fs::load_labels(a.train_label);
    if (a.method == "frangi") {
      result = fs::segment_frangi(tg, tl, gray, fs::frangi_defaults_for_pitch(gray.voxel_size_um(), a.fiber_diameter_um));
    } else {
      fs::ForestConfig cfg;
      cfg.seed = a.seed;
      auto run = fs::segment_forest(tg, tl, gray, cfg);
      if (!a.forest_out.empty()) fs::save_forest(run.forest, a.forest_out);
      result = std::move(run.result);
    }
  }
  std::cout << fs::format_report(fs::make_report(a.method, volume, gt, result.seg)) << "\n";
  if (result.threshold) std::printf("threshold=%.9g\n", *result.threshold);
  return 0;
}

struct TrainArgs {
  std::string preset;
  std::string gray;
  std::string label;
  std::string out;
  std::optional<int> dims;
  std::optional<std::string> variant;
  std::optional<std::int64_t> patch;
  std::optional<std::int64_t> iterations;
  std::optional<std::int64_t> batch_size;
  std::optional<double> lr;
  std::optional<double> fiber_prob;
  std::optional<std::int64_t> log_every;
  bool no_augment = false;
  std::string log_path;
  std::uint64_t seed = kDefaultSeed;
};

int run_train(const TrainArgs& a) {
  fs::Preset p;
  if (!a.preset.empty()) {
    p = fs::preset(a.preset);
  } else {
    if (!a.dims || !a.variant || !a.patch) {
      throw fs::InvalidArgument("train needs --preset or all of --dims, --variant and --patch");
    }
    p.model = fs::ModelConfig::standard(*a.dims, fs::parse_variant(*a.variant));
    p.train.iterations = fs::kPresetIterations;
  }
  if (a.dims || a.variant) {
    p.model = fs::ModelConfig::standard(a.dims.value_or(p.model.dimensionality),
                                        a.variant ? fs::parse_variant(*a.variant) : p.model.variant);
  }
  fs::TrainConfig& t = p.train;
  if (a.patch) {
    t.patch_shape = p.model.dimensionality == 2 ? fs::Dims{1, *a.patch, *a.patch} : fs::Dims{*a.patch, *a.patch, *a.patch};
  } else if (p.model.dimensionality == 2 && t.patch_shape.nz != 1) {
    t.patch_shape = {1, t.patch_shape.ny, t.patch_shape.nx};
  }
  if (a.iterations) t.iterations = *a.iterations;
  if (a.batch_size) t.batch_size = *a.batch_size;
  if (a.lr) t.lr = *a.lr;
  if (a.fiber_prob) t.fiber_biased_sampling_prob = *a.fiber_prob;
  if (a.log_every) t.log_every = *a.log_every;
  if (a.no_augment) t.augment = false;
  t.seed = a.seed;

  const fs::Volume gray = fs::normalize(fs::load_gray(a.gray));
  const fs::LabelVolume labels = fs::load_labels(a.label);
  fs::Model model = fs::build_model(p.model, a.seed);

  std::ofstream log;
  if (!a.log_path.empty()) {
    log.open(a.log_path, std::ios::app);
    if (!log) throw fs::Error("cannot open log file " + a.log_path);
  }
  auto record = fs::train_loop(gray, labels, model, t, [&](const fs::TrainLogEntry& e) {
    const std::string line = fs::format_log_line(e);
    std::cout << line << std::endl;
    if (log.is_open()) log << line << "\n";
  });
  fs::save_checkpoint(model, {t.iterations, a.seed}, a.out);
  record.checkpoint = a.out;
  std::cout << "checkpoint=" << record.checkpoint.string() << "\n";
  return 0;
}

struct PredictArgs {
  std::string checkpoint;
  std::string gray;
  std::string stem;
  std::int64_t patch = 32;
  std::optional<std::int64_t> stride;
};

int run_predict(const PredictArgs& a) {
  auto loaded = fs::load_checkpoint(a.checkpoint);
  const fs::Volume raw = fs::load_gray(a.gray);
  fs::InferOptions opts;
  opts.patch = {a.patch, a.patch, a.patch};
  if (a.stride) opts.stride = fs::Dims{*a.stride, *a.stride, *a.stride};
  const auto pred = fs::normalize_then_predict(loaded.model, raw, opts);
  fs::save_volume(pred.prob, a.stem + "_prob.vxg");
  fs::save_volume(pred.seg, a.stem + "_seg.vxg");
  return 0;
}

struct EvalArgs {
  std::string pred;
  std::string label;
  std::string method = "prediction";
  std::string volume_name;
};

int run_eval(const EvalArgs& a) {
  const auto pred = fs::load_labels(a.pred);
  const auto gt = fs::load_labels(a.label);
  const std::string volume = a.volume_name.empty() ? a.label : a.volume_name;
  std::cout << fs::format_report(fs::make_report(a.method, volume, gt, pred)) << "\n";
  return 0;
}

struct RenderArgs {
  std::string pred;
  std::string label;
  std::int64_t z = 0;
  std::string out;
};

int run_render(const RenderArgs& a) {
  fs::render_error_map(fs::load_labels(a.label), fs::load_labels(a.pred), a.z, a.out);
  return 0;
}

}  // namespace

int main(int argc, char** argv) {
  CLI::App app{"Fiber segmentation of CT volumes: phantoms, baselines, residual FCNs"};
  app.require_subcommand(1);

  PhantomArgs ph;
  auto* phantom = app.add_subcommand("phantom", "Render a synthetic fiber phantom");
  phantom->add_option("spec", ph.spec, "Phantom spec file (key=value)")->required()->check(CLI::ExistingFile);
  phantom->add_option("out_stem", ph.stem, "Output stem")->required();
  phantom->add_flag("--lr-pair", ph.lr_pair, "Also render the same scene at low resolution");
  phantom->add_option("--lr-pitch", ph.lr_pitch, "Low-resolution voxel size in um")->capture_default_str();
  phantom->add_option("--seed", ph.seed, "Overrides the seed of the spec file (default 42)");

  BaselineArgs bl;
  auto* baseline = app.add_subcommand("baseline", "Run a classical baseline and print its Dice report");
  baseline->add_option("method", bl.method, "otsu | best | frangi | rf")
      ->required()
      ->check(CLI::IsMember({"otsu", "best", "frangi", "rf"}));
  baseline->add_option("gray", bl.gray, "Evaluation gray volume")->required()->check(CLI::ExistingFile);
  baseline->add_option("label", bl.label, "Evaluation label volume")->required()->check(CLI::ExistingFile);
  baseline->add_option("--train-gray", bl.train_gray, "Training gray volume (frangi, rf)")->check(CLI::ExistingFile);
  baseline->add_option("--train-label", bl.train_label, "Training label volume (frangi, rf)")->check(CLI::ExistingFile);
  baseline->add_option("--volume-name", bl.volume_name, "Volume name in the report");
  baseline->add_option("--forest-out", bl.forest_out, "Save the trained forest (rf)");
  baseline->add_option("--fiber-diameter", bl.fiber_diameter_um, "Fiber diameter in um (frangi scales)")
      ->capture_default_str();
  baseline->add_option("--seed", bl.seed, "Random seed")->capture_default_str();

  TrainArgs tr;
  auto* train = app.add_subcommand("train", "Train a residual FCN");
  train->add_option("gray", tr.gray, "Training gray volume")->required()->check(CLI::ExistingFile);
  train->add_option("label", tr.label, "Training label volume")->required()->check(CLI::ExistingFile);
  train->add_option("out", tr.out, "Output checkpoint")->required();
  train->add_option("--preset", tr.preset, "mr2d-shallow, mr3d-deep, lr2d-shallow, ...");
  train->add_option("--dims", tr.dims, "Model dimensionality")->check(CLI::IsMember({2, 3}));
  train->add_option("--variant", tr.variant, "shallow | deep")->check(CLI::IsMember({"shallow", "deep"}));
  train->add_option("--patch", tr.patch, "Patch edge in voxels")->check(CLI::PositiveNumber);
  train->add_option("--iterations", tr.iterations, "Optimizer steps")->check(CLI::PositiveNumber);
  train->add_option("--batch-size", tr.batch_size, "Patches per step")->check(CLI::PositiveNumber);
  train->add_option("--lr", tr.lr, "Adam learning rate")->check(CLI::PositiveNumber);
  train->add_option("--fiber-prob", tr.fiber_prob, "Probability of a fiber-centred patch")->check(CLI::Range(0.0, 1.0));
  train->add_option("--log-every", tr.log_every, "Logging interval")->check(CLI::PositiveNumber);
  train->add_flag("--no-augment", tr.no_augment, "Disable flips and rotations");
  train->add_option("--log", tr.log_path, "Append log lines to this file");
  train->add_option("--seed", tr.seed, "Random seed")->capture_default_str();

  PredictArgs pr;
  auto* predict = app.add_subcommand("predict", "Segment a volume with a trained checkpoint");
  predict->add_option("checkpoint", pr.checkpoint, "Checkpoint file")->required()->check(CLI::ExistingFile);
  predict->add_option("gray", pr.gray, "Gray volume")->required()->check(CLI::ExistingFile);
  predict->add_option("out_stem", pr.stem, "Output stem")->required();
  predict->add_option("--patch", pr.patch, "3D patch edge in voxels")->capture_default_str()->check(CLI::PositiveNumber);
  predict->add_option("--stride", pr.stride, "3D stride (default patch / 2)")->check(CLI::PositiveNumber);

  EvalArgs ev;
  auto* eval = app.add_subcommand("eval", "Print the Dice report of a segmentation");
  eval->add_option("pred", ev.pred, "Predicted label volume")->required()->check(CLI::ExistingFile);
  eval->add_option("label", ev.label, "Ground-truth label volume")->required()->check(CLI::ExistingFile);
  eval->add_option("--method", ev.method, "Method name in the report")->capture_default_str();
  eval->add_option("--volume-name", ev.volume_name, "Volume name in the report");

  RenderArgs rd;
  auto* render = app.add_subcommand("render", "Write an error-map slice as a P6 pixmap");
  render->add_option("pred", rd.pred, "Predicted label volume")->required()->check(CLI::ExistingFile);
  render->add_option("label", rd.label, "Ground-truth label volume")->required()->check(CLI::ExistingFile);
  render->add_option("z", rd.z, "Slice index")->required();
  render->add_option("out", rd.out, "Output .ppm")->required();

  try {
    app.parse(argc, argv);
  } catch (const CLI::ParseError& e) {
    return app.exit(e);
  }

  try {
    if (*phantom) return run_phantom(ph);
    if (*baseline) return run_baseline(bl);
    if (*train) return run_train(tr);
    if (*predict) return run_predict(pr);
    if (*eval) return run_eval(ev);
    if (*render) return run_render(rd);
  } catch (const std::exception& e) {
    std::cerr << "fiberseg: error: " << e.what() << "\n";
    return 1;
  }
  return 1;
}
