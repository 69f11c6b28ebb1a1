#include "nowcast/cli.hpp"

#include <algorithm>
#include <cmath>
#include <cstdio>
#include <cstdlib>
#include <iostream>
#include <set>

#include <CLI11.hpp>
#include <Eigen/Core>
#include <fmt/format.h>
#include <fmt/ostream.h>
#include <png.h>
#ifdef _OPENMP
#include <omp.h>
#endif

#include "nowcast/evaluation.hpp"
#include "nowcast/pipeline.hpp"
#include "nowcast/training.hpp"

namespace nowcast {

namespace fs = std::filesystem;

namespace {

class UsageError : public Error {
 public:
  using Error::Error;
};

void prepare_output(const fs::path& dir, bool force) {
  if (fs::exists(dir) && !(fs::is_directory(dir) && fs::is_empty(dir))) {
    if (!force) throw UsageError(fmt::format("output '{}' already exists (use --force to overwrite)", dir.string()));
    fs::remove_all(dir);
  }
  fs::create_directories(dir);
}

void require_dir(const fs::path& dir, const char* what) {
  if (dir.empty() || !fs::is_directory(dir)) {
    throw UsageError(fmt::format("{} '{}' does not exist or is not a directory", what, dir.string()));
  }
}

struct GenArgs {
  fs::path out;
  std::size_t sequences = 120;
  std::size_t height = 64, width = 64, frames = 16;
  double speed_min = 0.5, speed_max = 2.0, rotation = 0.5, shear = 0.3, growth = 0.0;
  int blobs_min = 1, blobs_max = 4;
};

struct PrepArgs {
  fs::path in, out;
  double threshold = 0.1, min_fraction = 0.2, test_fraction = 0.2, val_fraction = 0.1;
};

struct TrainArgs {
  fs::path data, out;
  std::string model;
  std::size_t epochs = 100, batch_size = 16;
  double lr = 1e-3;
  int plateau_patience = 5, early_stop_patience = 15;
  fs::path pretrained_evo;
  bool freeze_evo = false;
};

struct EvalArgs {
  fs::path checkpoint, data, out;
  std::string model, split = "test";
  double threshold = kDefaultThreshold;
};

struct PredictArgs {
  fs::path checkpoint, data, out;
  std::string model, split = "test";
  std::size_t sample = 0;
};

struct ParamsArgs {
  std::string model;
  std::int64_t height = 64, width = 64;
};

struct ReportArgs {
  std::vector<fs::path> metrics;
  fs::path out;
};

std::size_t count_sequences(const std::vector<Sample>& samples) {
  std::set<std::uint32_t> ids;
  for (const auto& s : samples) ids.insert(s.key.sequence_id);
  return ids.size();
}

// First sequence id of the trailing `fraction` of sequences.
std::uint32_t tail_start(const std::vector<Sample>& samples, double fraction) {
  std::set<std::uint32_t> ids;
  for (const auto& s : samples) ids.insert(s.key.sequence_id);
  std::vector<std::uint32_t> v(ids.begin(), ids.end());
  const auto n = std::max<std::size_t>(1, std::size_t(std::llround(fraction * double(v.size()))));
  return v[v.size() - std::min(n, v.size() - 1)];
}

int cmd_gen(const GenArgs& a, std::uint64_t seed, bool force, std::ostream& out) {
  SyntheticConfig cfg;
  cfg.seed = seed;
  cfg.n_sequences = a.sequences;
  cfg.height = a.height;
  cfg.width = a.width;
  cfg.frames_per_sequence = a.frames;
  cfg.blobs.count_min = a.blobs_min;
  cfg.blobs.count_max = a.blobs_max;
  cfg.blobs.growth_max = a.growth;
  cfg.advection.speed_min = a.speed_min;
  cfg.advection.speed_max = a.speed_max;
  cfg.advection.rotation_max = a.rotation;
  cfg.advection.shear_max = a.shear;
  cfg.validate();
  prepare_output(a.out, force);
  SampleSet set = make_samples(synth_generate(cfg));
  Dataset d;
  d.manifest.stage = "raw";
  d.manifest.seed = seed;
  d.manifest.height = a.height;
  d.manifest.width = a.width;
  d.manifest.sequence_stride_hours = double(a.frames);
  const std::size_t n = set.samples.size();
  d.splits["all"] = std::move(set.samples);
  write_dataset(a.out, std::move(d));
  fmt::print(out, "wrote {} samples from {} sequences to {}\n", n, a.sequences, a.out.string());
  return kExitOk;
}

int cmd_preprocess(const PrepArgs& a, bool force, std::ostream& out) {
  require_dir(a.in, "input dataset");
  Dataset raw = read_dataset(a.in);
  if (raw.manifest.normalized()) throw UsageError("input dataset is already normalized");
  FilterRule rule{a.threshold, a.min_fraction};
  rule.validate();
  if (!(a.test_fraction > 0.0 && a.test_fraction < 1.0) || !(a.val_fraction > 0.0 && a.val_fraction < 1.0)) {
    throw UsageError("--test-fraction and --val-fraction must lie in (0,1)");
  }
  std::vector<Sample> all;
  for (auto& [name, samples] : raw.splits) {
    for (auto& s : samples) all.push_back(std::move(s));
  }
  FilterResult filtered = apply_sample_filter(std::move(all), rule);
  if (count_sequences(filtered.kept) < 3) {
    throw UsageError("preprocess needs retained samples from at least 3 sequences for train/val/test");
  }
  const double stride = raw.manifest.sequence_stride_hours;
  const double test_hour = double(tail_start(filtered.kept, a.test_fraction)) * stride;
  SplitResult tt = split_train_test(std::move(filtered.kept), test_hour);
  const double val_hour = double(tail_start(tt.train, a.val_fraction)) * stride;
  SplitResult tv = split_train_test(std::move(tt.train), val_hour);
  const auto stats = compute_stats(tv.train);
  for (const auto& s : stats) {
    if (s.variable != Variable::rel_humidity_2m) s.validate();
  }
  Dataset d;
  d.manifest = raw.manifest;
  d.manifest.stage = "normalized";
  d.manifest.has_stats = true;
  d.manifest.stats = stats;
  d.manifest.filter = rule;
  d.manifest.filter_total = filtered.total;
  d.manifest.filter_retained = filtered.retained;
  auto norm = [&](std::vector<Sample>& v) {
    for (auto& s : v) s = normalize_sample(s, stats);
    return std::move(v);
  };
  d.splits["train"] = norm(tv.train);
  d.splits["val"] = norm(tv.test);
  d.splits["test"] = norm(tt.test);
  prepare_output(a.out, force);
  fmt::print(out, "retained {}/{} samples ({:.4f}); train {} val {} test {}\n", filtered.retained, filtered.total,
             filtered.retention(), d.splits["train"].size(), d.splits["val"].size(), d.splits["test"].size());
  write_dataset(a.out, std::move(d));
  return kExitOk;
}

TrainConfig train_config(const TrainArgs& a, std::uint64_t seed) {
  TrainConfig c;
  c.lr_init = a.lr;
  c.max_epochs = a.epochs;
  c.batch_size = a.batch_size;
  c.plateau_patience = a.plateau_patience;
  c.early_stop_patience = a.early_stop_patience;
  c.seed = seed;
  c.freeze_evo = a.freeze_evo;
  if (!a.pretrained_evo.empty()) {
    require_dir(a.pretrained_evo, "pretrained evolution checkpoint");
    c.pretrained_evo = a.pretrained_evo;
  }
  try {
    c.validate();
  } catch (const ConfigError& e) {
    throw UsageError(e.what());
  }
  return c;
}

struct TrainingData {
  DatasetManifest manifest;
  std::vector<Sample> train, val;
};

TrainingData load_training_data(const fs::path& dir) {
  require_dir(dir, "dataset");
  TrainingData d;
  d.manifest = read_manifest(dir);
  if (!d.manifest.normalized()) throw UsageError("training needs a preprocessed (normalized) dataset");
  d.train = read_split(dir, d.manifest, "train");
  d.val = read_split(dir, d.manifest, "val");
  return d;
}

void print_history(std::ostream& out, const FitResult& r) {
  for (const auto& e : r.history.epochs) {
    fmt::print(out, "epoch {:3d}  train {:.6g}  val {:.6g}  lr {:.1e}  {:.1f}s\n", e.epoch, e.train_mse, e.val_mse,
               e.lr, e.seconds);
  }
  fmt::print(out, "best val {:.6g} at epoch {}{}\n", r.best_val, r.best_epoch, r.early_stopped ? " (early stop)" : "");
}

int cmd_train(const TrainArgs& a, std::uint64_t seed, bool force, std::ostream& out) {
  const ModelVariant v = parse_variant(a.model);
  if (!is_trainable(v)) throw UsageError("persistence has no parameters to train");
  const TrainConfig cfg = train_config(a, seed);
  TrainingData data = load_training_data(a.data);
  prepare_output(a.out, force);
  auto model = build_model<float>(
      ModelConfig::defaults(v, std::int64_t(data.manifest.height), std::int64_t(data.manifest.width)), seed);
  FitResult r;
  try {
    r = fit(*model, data.train, data.val, cfg);
  } catch (const Divergence&) {
    save_checkpoint(a.out, *model, seed);
    throw;
  }
  save_checkpoint(a.out, *model, seed);
  r.history.write_csv(a.out / "history.csv");
  print_history(out, r);
  return kExitOk;
}

int cmd_pretrain(const TrainArgs& a, std::uint64_t seed, bool force, std::ostream& out) {
  const TrainConfig cfg = train_config(a, seed);
  TrainingData data = load_training_data(a.data);
  prepare_output(a.out, force);
  FitResult r;
  auto model = pretrain_evolution(data.train, data.val, cfg, std::int64_t(data.manifest.height),
                                  std::int64_t(data.manifest.width), &r);
  save_checkpoint(a.out, *model, seed);
  r.history.write_csv(a.out / "history.csv");
  print_history(out, r);
  return kExitOk;
}

std::unique_ptr<Forecaster<float>> model_from_args(const fs::path& checkpoint, const std::string& variant,
                                                   const DatasetManifest& m) {
  if (checkpoint.empty() == variant.empty()) {
    throw UsageError("give exactly one of --checkpoint <dir> or --model persistence");
  }
  if (!variant.empty()) {
    const ModelVariant v = parse_variant(variant);
    if (v != ModelVariant::persistence) throw UsageError("--model without a checkpoint is only valid for persistence");
    return build_model<float>(ModelConfig::defaults(v, std::int64_t(m.height), std::int64_t(m.width)), 0);
  }
  require_dir(checkpoint, "checkpoint");
  auto model = load_checkpoint(checkpoint);
  if (model->config().height != std::int64_t(m.height) || model->config().width != std::int64_t(m.width)) {
    throw UsageError(fmt::format("checkpoint expects {}x{} inputs, dataset is {}x{}", model->config().height,
                                 model->config().width, m.height, m.width));
  }
  return model;
}

int cmd_evaluate(const EvalArgs& a, bool force, std::ostream& out) {
  if (a.checkpoint.empty() && a.model.empty()) throw UsageError("evaluate needs --checkpoint <dir>");
  require_dir(a.data, "dataset");
  const DatasetManifest m = read_manifest(a.data);
  if (!m.normalized()) throw UsageError("evaluate needs a preprocessed (normalized) dataset");
  auto model = model_from_args(a.checkpoint, a.model, m);
  const std::vector<Sample> samples = read_split(a.data, m, a.split);
  if (samples.empty()) throw UsageError(fmt::format("split '{}' is empty", a.split));
  prepare_output(a.out, force);
  MetricReport r = evaluate_model(*model, samples, stats_for(m.stats, Variable::rain), a.threshold);
  write_metrics_json(a.out / "metrics.json", r);
  write_per_step_csv(a.out / "per_step.csv", r);
  write_mse_svg(a.out / "mse_per_step.svg", {r});
  fmt::print(out, "{}: mse {:.6g} [{}]  acc {:.4f} prec {:.4f} rec {:.4f} f1 {:.4f} csi {:.4f} mcc {:.4f}\n", r.model,
             r.mse_total, fmt::join(r.mse_per_step, ", "), r.metrics.acc, r.metrics.prec, r.metrics.rec,
             r.metrics.f1, r.metrics.csi, r.metrics.mcc);
  return kExitOk;
}

int cmd_predict(const PredictArgs& a, bool force, std::ostream& out) {
  require_dir(a.data, "dataset");
  const DatasetManifest m = read_manifest(a.data);
  if (!m.normalized()) throw UsageError("predict needs a preprocessed (normalized) dataset");
  auto model = model_from_args(a.checkpoint, a.model, m);
  const std::vector<Sample> samples = read_split(a.data, m, a.split);
  if (a.sample >= samples.size()) {
    throw UsageError(fmt::format("--sample {} out of range ({} samples in '{}')", a.sample, samples.size(), a.split));
  }
  const Sample& s = samples[a.sample];
  Forecast f = forward(*model, s);
  const auto& rs = stats_for(m.stats, Variable::rain);

  Sample phys;
  phys.key = s.key;
  phys.rain_in = denormalize(s.rain_in, rs);
  phys.rain_target = denormalize(FrameSequence(Variable::rain, f.frames, s.rain_target.step_hours(),
                                               s.rain_target.start_hour()),
                                 rs);
  for (std::size_t v = 0; v < kAuxVariableCount; ++v) phys.aux_in[v] = denormalize(s.aux_in[v], stats_for(m.stats, kAuxVariables[v]));
  const FrameSequence truth = denormalize(s.rain_target, rs);

  prepare_output(a.out, force);
  Dataset d;
  d.manifest = m;
  d.manifest.stage = "raw";
  d.manifest.has_stats = false;
  d.splits["prediction"] = {phys};
  write_dataset(a.out, std::move(d));

  double vmax = 0.0;
  for (const FrameSequence* seq : std::initializer_list<const FrameSequence*>{&phys.rain_in, &phys.rain_target, &truth}) {
    for (const auto& g : seq->frames()) {
      for (float x : g.values()) vmax = std::max(vmax, double(x));
    }
  }
  for (std::size_t t = 0; t < kInputFrames; ++t) {
    write_rain_png(a.out / fmt::format("input_{}.png", t + 1), phys.rain_in[t], vmax);
  }
  for (std::size_t t = 0; t < kHorizon; ++t) {
    write_rain_png(a.out / fmt::format("pred_{}.png", t + 1), phys.rain_target[t], vmax);
    write_rain_png(a.out / fmt::format("target_{}.png", t + 1), truth[t], vmax);
  }
  fmt::print(out, "sample ({}, {}) from '{}': wrote prediction record and {} PNGs to {}\n", s.key.sequence_id,
             s.key.window_start, a.split, kInputFrames + 2 * kHorizon, a.out.string());
  return kExitOk;
}

int cmd_params(const ParamsArgs& a, std::ostream& out) {
  const ModelVariant v = parse_variant(a.model);
  auto model = build_model<float>(ModelConfig::defaults(v, a.height, a.width), 0);
  const ParameterBreakdown b = count_parameters(*model);
  fmt::print(out, "model {} ({}x{})\n", to_string(v), a.height, a.width);
  fmt::print(out, "{:<24} {:>12}\n", "submodule", "parameters");
  for (const auto& [name, n] : b.per_submodule) fmt::print(out, "{:<24} {:>12}\n", name, n);
  fmt::print(out, "{:<24} {:>12}\n", "total", b.total);
  if (auto ref = reference_parameter_count(v)) {
    fmt::print(out, "{:<24} {:>12} ({:+.2f}%)\n", "reference", *ref, 100.0 * double(b.total - *ref) / double(*ref));
  }
  return kExitOk;
}

int cmd_report(const ReportArgs& a, bool force, std::ostream& out) {
  if (a.metrics.empty()) throw UsageError("report needs at least one --metrics file");
  std::vector<MetricReport> reports;
  for (const auto& f : a.metrics) {
    if (!fs::is_regular_file(f)) throw UsageError(fmt::format("metrics file '{}' not found", f.string()));
    reports.push_back(read_metrics_json(f));
  }
  const std::string table = comparison_table(reports);
  out << table;
  if (!a.out.empty()) {
    prepare_output(a.out, force);
    std::ofstream md(a.out / "comparison.md");
    md << table;
    write_mse_svg(a.out / "mse_per_step.svg", reports);
  }
  return kExitOk;
}

}  // namespace

std::optional<std::int64_t> reference_parameter_count(ModelVariant v) {
  switch (v) {
    case ModelVariant::smaat_unet: return 4110400;
    case ModelVariant::mad_smaat_gnet: return 7453676;
    case ModelVariant::smaat_evo: return 3745936;
    case ModelVariant::smaat_2stream: return 4766624;
    case ModelVariant::evo_net: return 2219500;
    case ModelVariant::persistence: return std::nullopt;
  }
  return std::nullopt;
}

void apply_thread_limit() {
  const char* env = std::getenv("NOWCASTLAB_THREADS");
  if (!env || !*env) return;
  char* end = nullptr;
  const long n = std::strtol(env, &end, 10);
  if (*end != '\0' || n < 1) throw UsageError(fmt::format("NOWCASTLAB_THREADS must be a positive integer, got '{}'", env));
#ifdef _OPENMP
  omp_set_num_threads(int(n));
#endif
  Eigen::setNbThreads(int(n));
}

void write_rain_png(const fs::path& file, const Grid2D& grid, double vmax) {
  FILE* fp = std::fopen(file.string().c_str(), "wb");
  if (!fp) throw InvalidInput(fmt::format("cannot write {}", file.string()));
  png_structp png = png_create_write_struct(PNG_LIBPNG_VER_STRING, nullptr, nullptr, nullptr);
  png_infop info = png ? png_create_info_struct(png) : nullptr;
  if (!png || !info || setjmp(png_jmpbuf(png))) {
    png_destroy_write_struct(&png, &info);
    std::fclose(fp);
    throw InvalidInput(fmt::format("PNG encoding failed for {}", file.string()));
  }
  const auto h = png_uint_32(grid.height()), w = png_uint_32(grid.width());
  png_init_io(png, fp);
  png_set_IHDR(png, info, w, h, 8, PNG_COLOR_TYPE_RGB, PNG_INTERLACE_NONE, PNG_COMPRESSION_TYPE_DEFAULT,
               PNG_FILTER_TYPE_DEFAULT);
  png_write_info(png, info);
  // white -> light blue -> blue -> red
  static constexpr double stops[4][4] = {
      {0.0, 255, 255, 255}, {0.05, 190, 220, 255}, {0.4, 20, 60, 220}, {1.0, 220, 20, 20}};
  std::vector<png_byte> row(std::size_t(w) * 3);
  for (png_uint_32 y = 0; y < h; ++y) {
    for (png_uint_32 x = 0; x < w; ++x) {
      const double t = vmax > 0.0 ? std::clamp(double(grid.at(y, x)) / vmax, 0.0, 1.0) : 0.0;
      int k = 0;
      while (k < 2 && t > stops[k + 1][0]) ++k;
      const double f = (t - stops[k][0]) / (stops[k + 1][0] - stops[k][0]);
      for (int c = 0; c < 3; ++c) {
        row[3 * x + c] = png_byte(std::lround(stops[k][c + 1] + f * (stops[k + 1][c + 1] - stops[k][c + 1])));
      }
    }
    png_write_row(png, row.data());
  }
  png_write_end(png, nullptr);
  png_destroy_write_struct(&png, &info);
  std::fclose(fp);
}

int run_cli(const std::vector<std::string>& args, std::ostream& out, std::ostream& err) {
  CLI::App app{"Precipitation nowcasting lab: synthetic data, dual-encoder attention U-Nets, evaluation.",
               "nowcastlab"};
  app.set_config("--config", "", "INI file; [section] names match subcommands; flags override it");
  app.allow_config_extras(CLI::config_extras_mode::error);
  app.require_subcommand(1, 1);
  std::uint64_t seed = 0;
  bool force = false;
  app.add_option("--seed", seed, "Seed for every random choice")->capture_default_str();
  app.add_flag("--force", force, "Overwrite existing outputs");

  GenArgs gen;
  auto* g = app.add_subcommand("gen-data", "Generate a raw synthetic dataset");
  g->add_option("--out", gen.out, "Output dataset directory")->required();
  g->add_option("--sequences", gen.sequences, "Number of sequences")->capture_default_str();
  g->add_option("--height", gen.height, "Grid height")->capture_default_str();
  g->add_option("--width", gen.width, "Grid width")->capture_default_str();
  g->add_option("--frames", gen.frames, "Frames per sequence")->capture_default_str();
  g->add_option("--blobs-min", gen.blobs_min, "Minimum blobs per sequence")->capture_default_str();
  g->add_option("--blobs-max", gen.blobs_max, "Maximum blobs per sequence")->capture_default_str();
  g->add_option("--speed-min", gen.speed_min, "Minimum mean speed (px/step)")->capture_default_str();
  g->add_option("--speed-max", gen.speed_max, "Maximum mean speed (px/step)")->capture_default_str();
  g->add_option("--rotation", gen.rotation, "Maximum rotation speed at the edge (px/step)")->capture_default_str();
  g->add_option("--shear", gen.shear, "Maximum shear speed at the edge (px/step)")->capture_default_str();
  g->add_option("--growth", gen.growth, "Maximum relative intensity change per step")->capture_default_str();

  PrepArgs prep;
  auto* p = app.add_subcommand("preprocess", "Filter, split and normalize a raw dataset");
  p->add_option("--in", prep.in, "Raw dataset directory")->required();
  p->add_option("--out", prep.out, "Output dataset directory")->required();
  p->add_option("--threshold", prep.threshold, "Wet-pixel threshold (mm/h, strict)")->capture_default_str();
  p->add_option("--min-fraction", prep.min_fraction, "Minimum wet fraction of the first input frame")
      ->capture_default_str();
  p->add_option("--test-fraction", prep.test_fraction, "Trailing fraction of sequences for test")->capture_default_str();
  p->add_option("--val-fraction", prep.val_fraction, "Trailing fraction of training sequences for validation")
      ->capture_default_str();

  TrainArgs train, pre;
  auto add_train_opts = [](CLI::App* s, TrainArgs& t) {
    s->add_option("--data", t.data, "Preprocessed dataset directory")->required();
    s->add_option("--out", t.out, "Checkpoint directory")->required();
    s->add_option("--epochs", t.epochs, "Maximum epochs")->capture_default_str();
    s->add_option("--batch-size", t.batch_size, "Mini-batch size")->capture_default_str();
    s->add_option("--lr", t.lr, "Initial learning rate")->capture_default_str();
    s->add_option("--plateau-patience", t.plateau_patience, "Epochs without improvement before lr x0.1")
        ->capture_default_str();
    s->add_option("--early-stop-patience", t.early_stop_patience, "Epochs without improvement before stopping")
        ->capture_default_str();
  };
  auto* t = app.add_subcommand("train", "Train a forecaster");
  add_train_opts(t, train);
  t->add_option("--model", train.model, "Model variant")->required();
  t->add_option("--pretrained-evo", train.pretrained_evo, "Evolution checkpoint to start from");
  t->add_flag("--freeze-evo", train.freeze_evo, "Keep evolution parameters fixed");
  auto* pe = app.add_subcommand("pretrain-evo", "Pretrain the evolution network alone");
  add_train_opts(pe, pre);

  EvalArgs ev;
  auto* e = app.add_subcommand("evaluate", "Score a model on a dataset split");
  e->add_option("--checkpoint", ev.checkpoint, "Checkpoint directory");
  e->add_option("--model", ev.model, "Use 'persistence' instead of a checkpoint");
  e->add_option("--data", ev.data, "Preprocessed dataset directory")->required();
  e->add_option("--out", ev.out, "Output directory")->required();
  e->add_option("--split", ev.split, "Split to score")->capture_default_str();
  e->add_option("--threshold", ev.threshold, "Rain threshold (mm/h, strict)")->capture_default_str();

  PredictArgs pr;
  auto* pd = app.add_subcommand("predict", "Forecast one sample and render it");
  pd->add_option("--checkpoint", pr.checkpoint, "Checkpoint directory");
  pd->add_option("--model", pr.model, "Use 'persistence' instead of a checkpoint");
  pd->add_option("--data", pr.data, "Preprocessed dataset directory")->required();
  pd->add_option("--sample", pr.sample, "Sample index within the split")->capture_default_str();
  pd->add_option("--split", pr.split, "Split to read")->capture_default_str();
  pd->add_option("--out", pr.out, "Output directory")->required();

  ParamsArgs pa;
  auto* pm = app.add_subcommand("params", "Print parameter counts per submodule");
  pm->add_option("--model", pa.model, "Model variant")->required();
  pm->add_option("--height", pa.height, "Input height")->capture_default_str();
  pm->add_option("--width", pa.width, "Input width")->capture_default_str();

  ReportArgs rp;
  auto* r = app.add_subcommand("report", "Comparison table across metrics.json files");
  r->add_option("--metrics", rp.metrics, "metrics.json files")->required();
  r->add_option("--out", rp.out, "Directory for comparison.md and mse_per_step.svg");

  try {
    std::vector<std::string> reversed(args.rbegin(), args.rend());
    app.parse(reversed);
  } catch (const CLI::CallForHelp&) {
    out << app.help();
    return kExitOk;
  } catch (const CLI::CallForAllHelp&) {
    out << app.help("", CLI::AppFormatMode::All);
    return kExitOk;
  } catch (const CLI::ParseError& ex) {
    err << "error: " << ex.what() << "\n";
    const auto subs = app.get_subcommands();
    err << (subs.empty() ? app.help() : subs.front()->help());
    return kExitUsage;
  }

  try {
    apply_thread_limit();
    if (*g) return cmd_gen(gen, seed, force, out);
    if (*p) return cmd_preprocess(prep, force, out);
    if (*t) return cmd_train(train, seed, force, out);
    if (*pe) return cmd_pretrain(pre, seed, force, out);
    if (*e) return cmd_evaluate(ev, force, out);
    if (*pd) return cmd_predict(pr, force, out);
    if (*pm) return cmd_params(pa, out);
    if (*r) return cmd_report(rp, force, out);
  } catch (const UsageError& ex) {
    err << "error: " << ex.what() << "\n";
    const auto subs = app.get_subcommands();
    if (!subs.empty()) err << subs.front()->help();
    return kExitUsage;
  } catch (const ConfigError& ex) {
    err << "error: " << ex.what() << "\n";
    return kExitUsage;
  } catch (const CorruptData& ex) {
    err << "corrupt data: " << ex.what() << "\n";
    return kExitCorrupt;
  } catch (const Divergence& ex) {
    err << "training diverged: " << ex.what() << "\n";
    return kExitDivergence;
  } catch (const std::exception& ex) {
    err << "error: " << ex.what() << "\n";
    return kExitFailure;
  }
  return kExitUsage;
}

int run_cli(const std::vector<std::string>& args) { return run_cli(args, std::cout, std::cerr); }

}  // namespace nowcast
