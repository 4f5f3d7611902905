#pragma once

#include <algorithm>
#include <chrono>
#include <filesystem>
#include <fstream>
#include <map>
#include <optional>
#include <sstream>
#include <string>
#include <vector>

#include "echoseg/config.hpp"
#include "echoseg/dataset.hpp"
#include "echoseg/io.hpp"
#include "echoseg/metrics.hpp"
#include "echoseg/model.hpp"
#include "echoseg/postprocess.hpp"
#include "echoseg/trainer.hpp"
#include "echoseg/wilcoxon.hpp"

namespace echoseg {

namespace fs = std::filesystem;

inline constexpr const char* kCheckpointName = "model.ckpt";
inline constexpr const char* kHistoryName = "history.txt";
inline constexpr const char* kSummaryName = "summary.txt";
inline constexpr const char* kConfigSuffix = ".ini";  // sidecar next to a checkpoint

// ------------------------------------------------------------ data

struct RunData {
  std::vector<SegmentationSample> train, val, test;
  bool shared = false;  // split = all: the three sets are identical
};

inline std::vector<SegmentationSample> load_samples(const DataSpec& d) {
  if (!d.path.empty()) return load_dataset(d.path);
  return generate_phantoms(d.phantoms, d.phantom_seed, d.phantom_options());
}

inline RunData load_run_data(const DataSpec& d) {
  std::vector<SegmentationSample> all = load_samples(d);
  RunData r;
  if (d.split == SplitMode::all) {
    r.train = all;
    r.shared = true;
    return r;
  }
  const DatasetSplit s = split(all, d.split_seed);
  r.train = select(all, s.train);
  r.val = select(all, s.val);
  r.test = select(all, s.test);
  return r;
}

inline const std::vector<SegmentationSample>& val_set(const RunData& d) { return d.shared ? d.train : d.val; }
inline const std::vector<SegmentationSample>& test_set(const RunData& d) { return d.shared ? d.train : d.test; }

/// Per-frame predictions in eval mode.
inline std::vector<LabelMap> predict_frames(UNet& model, const std::vector<SegmentationSample>& samples,
                                            std::size_t batch = 4) {
  std::vector<LabelMap> out;
  out.reserve(samples.size());
  for (std::size_t b = 0; b < samples.size(); b += batch) {
    const std::size_t end = std::min(samples.size(), b + batch);
    auto [x, y] = make_batch<float>(samples, b, end);
    const LabelMap pred = model.predict(x);
    for (std::size_t n = 0; n < end - b; ++n) {
      out.push_back(pred.slice0(n, n + 1).reshaped({pred.dim(1), pred.dim(2)}));
    }
  }
  return out;
}

inline MetricsReport evaluate_predictions(const std::vector<SegmentationSample>& samples,
                                          const std::vector<LabelMap>& predictions,
                                          const std::optional<PostprocessConfig>& post) {
  if (samples.size() != predictions.size()) throw InvalidInputError("evaluate: prediction count differs from samples");
  MetricsReport report;
  report.postprocessed = post.has_value();
  for (std::size_t i = 0; i < samples.size(); ++i) {
    const LabelMap p = post ? postprocess(predictions[i], *post) : predictions[i];
    report.records.push_back(evaluate_frame(samples[i].id, p, samples[i].label));
  }
  return report;
}

// ------------------------------------------------------------ history

inline constexpr const char* kHistoryHeader = "# echoseg-history 1";

inline std::string format_history(const TrainHistory& h) {
  using detail::format_double;
  std::ostringstream os;
  os << kHistoryHeader << "\n";
  for (const auto& e : h.epochs) {
    os << "epoch " << e.epoch << " train_loss " << format_double(e.train_loss) << " val_loss "
       << format_double(e.val_loss) << " val_dice " << format_double(e.val_dice) << " lr " << format_double(e.lr)
       << " train_dice " << (e.train_dice ? format_double(*e.train_dice) : "undef") << "\n";
  }
  os << "best " << h.best_epoch << " " << format_double(h.best_val_loss) << "\n";
  os << "stop " << h.stop_reason << "\n";
  return os.str();
}

inline TrainHistory parse_history(const std::string& text, const std::string& source = "history") {
  std::istringstream is(text);
  std::string line;
  if (!std::getline(is, line) || line != kHistoryHeader) throw CorruptFileError(source + ": missing history header");
  TrainHistory h;
  std::size_t lineno = 1;
  bool have_best = false, have_stop = false;
  while (std::getline(is, line)) {
    ++lineno;
    if (line.empty()) continue;
    const std::string where = source + ":" + std::to_string(lineno);
    std::istringstream ls(line);
    std::string tag;
    ls >> tag;
    if (tag == "epoch") {
      EpochRecord e;
      std::string k[5], v[5];
      if (!(ls >> e.epoch >> k[0] >> v[0] >> k[1] >> v[1] >> k[2] >> v[2] >> k[3] >> v[3] >> k[4] >> v[4]) ||
          k[0] != "train_loss" || k[1] != "val_loss" || k[2] != "val_dice" || k[3] != "lr" || k[4] != "train_dice") {
        throw CorruptFileError(where + ": malformed epoch line");
      }
      e.train_loss = detail::parse_double(v[0], where);
      e.val_loss = detail::parse_double(v[1], where);
      e.val_dice = detail::parse_double(v[2], where);
      e.lr = detail::parse_double(v[3], where);
      if (v[4] != "undef") e.train_dice = detail::parse_double(v[4], where);
      h.epochs.push_back(e);
    } else if (tag == "best") {
      std::string loss;
      if (!(ls >> h.best_epoch >> loss)) throw CorruptFileError(where + ": malformed best line");
      h.best_val_loss = loss == "inf" ? std::numeric_limits<double>::infinity() : detail::parse_double(loss, where);
      have_best = true;
    } else if (tag == "stop") {
      if (!(ls >> h.stop_reason)) throw CorruptFileError(where + ": malformed stop line");
      have_stop = true;
    } else {
      throw CorruptFileError(where + ": unknown line '" + tag + "'");
    }
  }
  if (!have_best || !have_stop) throw CorruptFileError(source + ": truncated history");
  return h;
}

// ------------------------------------------------------------ train

struct TrainResult {
  fs::path checkpoint, history, summary;
  TrainHistory log;
  MetricsReport test_report;
};

inline std::string config_sidecar(const fs::path& checkpoint) { return checkpoint.string() + kConfigSuffix; }

inline std::string format_summary(const RunConfig& cfg, const UNet& model, const TrainHistory& h,
                                  const MetricsReport& test) {
  std::ostringstream os;
  const MetricsSummary s = test.summary();
  os << "preset          " << cfg.preset << "\n";
  os << "model           " << cfg.model.channel_notation() << ", " << model.count_params() << " parameters\n";
  os << "                " << to_string(cfg.model.downsampling) << " down, " << to_string(cfg.model.upsampling)
     << " up, " << to_string(cfg.model.normalization) << " norm, " << to_string(cfg.model.activation)
     << (cfg.model.deep_supervision ? ", deep supervision" : "") << "\n";
  os << "loss            " << to_string(cfg.train.loss) << "\n";
  os << "augmentation    " << cfg.train.augmentation.name << "\n";
  os << "epochs run      " << h.epochs.size() << " (stop: " << h.stop_reason << ")\n";
  os << "best epoch      " << h.best_epoch << ", val loss " << detail::format_double(h.best_val_loss) << "\n";
  if (!h.epochs.empty() && h.epochs.back().train_dice) {
    os << "train dice      " << detail::format_double(*h.epochs.back().train_dice) << " (last epoch)\n";
  }
  os << "test samples    " << s.samples << (test.postprocessed ? " (postprocessed)" : "") << "\n";
  os << "dice LV/MYO/LA  " << detail::format_double(s.mean_dice[0]) << " " << detail::format_double(s.mean_dice[1])
     << " " << detail::format_double(s.mean_dice[2]) << "\n";
  os << "hd   LV/MYO/LA  " << detail::format_double(s.mean_hausdorff[0]) << " "
     << detail::format_double(s.mean_hausdorff[1]) << " " << detail::format_double(s.mean_hausdorff[2]) << "\n";
  os << "outliers        " << s.outliers << "\n";
  return os.str();
}

/// Trains the configured model and writes, under cfg.output_dir:
///   model.ckpt       best weights
///   model.ckpt.ini   the resolved run config
///   history.txt      per-epoch log
///   summary.txt      human-readable overview with test metrics
inline TrainResult cmd_train(const RunConfig& cfg, const EpochCallback& on_epoch = {}) {
  validate(cfg);
  const RunData data = load_run_data(cfg.data);
  UNet model(cfg.model, cfg.train.seed);
  TrainResult r;
  r.log = train(model, data.train, val_set(data), cfg.train, on_epoch);
  const std::optional<PostprocessConfig> post =
      cfg.postprocess.keep_largest || cfg.postprocess.morphology ? std::optional(cfg.postprocess) : std::nullopt;
  r.test_report = evaluate_predictions(test_set(data), predict_frames(model, test_set(data)), post);

  const fs::path dir(cfg.output_dir);
  fs::create_directories(dir);
  r.checkpoint = dir / kCheckpointName;
  r.history = dir / kHistoryName;
  r.summary = dir / kSummaryName;
  save_model(r.checkpoint.string(), model);
  detail::write_file(config_sidecar(r.checkpoint), format_run_config(cfg));
  detail::write_file(r.history.string(), format_history(r.log));
  detail::write_file(r.summary.string(), format_summary(cfg, model, r.log, r.test_report));
  return r;
}

// ------------------------------------------------------------ checkpoints

struct LoadedModel {
  RunConfig config;
  UNet model;
};

inline LoadedModel load_checkpoint(const std::string& path) {
  if (!fs::exists(path)) throw MissingFileError("checkpoint '" + path + "' not found");
  const std::string sidecar = config_sidecar(path);
  if (!fs::exists(sidecar)) throw MissingFileError("checkpoint config '" + sidecar + "' not found");
  RunConfig cfg = load_run_config(sidecar);
  LoadedModel m{cfg, UNet(cfg.model, cfg.train.seed)};
  load_model(path, m.model);
  return m;
}

// ------------------------------------------------------------ eval

/// Scores a checkpoint on a dataset directory, or on the test split of its
/// own data spec when `dataset` is empty. With `use_postprocess` the
/// predictions go through largest-component filtering plus any morphology
/// from the checkpoint config.
inline MetricsReport cmd_eval(const std::string& checkpoint, const std::string& dataset, bool use_postprocess) {
  LoadedModel m = load_checkpoint(checkpoint);
  const std::vector<SegmentationSample> samples =
      dataset.empty() ? test_set(load_run_data(m.config.data)) : load_dataset(dataset);
  for (const auto& s : samples) {
    if (s.image.dim(0) != m.config.model.input_size || s.image.dim(1) != m.config.model.input_size) {
      throw InvalidInputError("sample '" + s.id + "' is " + shape_string(s.image.shape()) + ", model expects " +
                              std::to_string(m.config.model.input_size) + "x" +
                              std::to_string(m.config.model.input_size));
    }
  }
  std::optional<PostprocessConfig> post;
  if (use_postprocess) {
    post = m.config.postprocess;
    post->keep_largest = true;
  }
  return evaluate_predictions(samples, predict_frames(m.model, samples), post);
}

// ------------------------------------------------------------ infer

struct InferResult {
  fs::path label, overlay;
  LabelMap prediction;
};

/// Segments one PGM frame; writes `<out>_label.pgm` and `<out>_overlay.ppm`.
inline InferResult cmd_infer(const std::string& checkpoint, const std::string& image, const std::string& out,
                             bool use_postprocess = true) {
  LoadedModel m = load_checkpoint(checkpoint);
  const Tensor<std::uint8_t> gray = read_pgm(image);
  const std::size_t S = m.config.model.input_size;
  if (gray.dim(0) != S || gray.dim(1) != S) {
    throw InvalidInputError("image '" + image + "' is " + shape_string(gray.shape()) + ", model expects " +
                            std::to_string(S) + "x" + std::to_string(S));
  }
  SegmentationSample s{"input", gray.cast<float>(), LabelMap(gray.shape())};
  InferResult r;
  r.prediction = predict_frames(m.model, {s}, 1).front();
  if (use_postprocess) {
    PostprocessConfig post = m.config.postprocess;
    post.keep_largest = true;
    r.prediction = postprocess(r.prediction, post);
  }
  r.label = out + "_label.pgm";
  r.overlay = out + "_overlay.ppm";
  if (r.label.has_parent_path()) fs::create_directories(r.label.parent_path());
  write_pgm(r.label.string(), r.prediction);
  write_ppm(r.overlay.string(), overlay(gray, r.prediction));
  return r;
}

// ------------------------------------------------------------ bench

struct BenchOptions {
  std::size_t frames = 100;
  std::size_t warmup = 10;
  int threads = 1;
  std::uint64_t seed = 1;
};

struct LatencyStats {
  std::string name;
  std::size_t params = 0;
  double median_ms = 0, p95_ms = 0, mean_ms = 0;
};

struct BenchReport {
  LatencyStats a, b;
  double latency_ratio = 0;  // median b / median a
  double param_ratio = 0;    // params b / params a
  BenchOptions options;
};

/// A checkpoint path, or the name of a run preset (randomly initialized).
inline UNet bench_model(const std::string& spec, std::uint64_t seed) {
  if (fs::is_regular_file(spec)) return load_checkpoint(spec).model;
  return UNet(run_presets::by_name(spec).model, seed);
}

namespace detail {
inline double percentile(std::vector<double> v, double q) {
  std::ranges::sort(v);
  const double pos = q * static_cast<double>(v.size() - 1);
  const auto lo = static_cast<std::size_t>(pos);
  const std::size_t hi = std::min(lo + 1, v.size() - 1);
  return v[lo] + (pos - static_cast<double>(lo)) * (v[hi] - v[lo]);
}
}  // namespace detail

/// Per-frame latency of forward pass plus argmax at batch size 1, eval mode.
/// Input is a phantom frame prepared in memory, so no file I/O is timed.
inline LatencyStats measure_latency(UNet& model, const std::string& name, const BenchOptions& o) {
  PhantomOptions po;
  po.size = model.config().input_size;
  const SegmentationSample frame = generate_phantoms(1, o.seed, po).front();
  const Tensor<float> x = make_batch<float>(std::vector<SegmentationSample>{frame}, 0, 1).first;
  volatile std::uint8_t sink = 0;
  for (std::size_t i = 0; i < o.warmup; ++i) sink = sink + model.predict(x)[0];
  std::vector<double> ms;
  ms.reserve(o.frames);
  for (std::size_t i = 0; i < o.frames; ++i) {
    const auto t0 = std::chrono::steady_clock::now();
    const LabelMap pred = model.predict(x);
    const auto t1 = std::chrono::steady_clock::now();
    sink = sink + pred[0];
    ms.push_back(std::chrono::duration<double, std::milli>(t1 - t0).count());
  }
  LatencyStats s{name, model.count_params(), detail::percentile(ms, 0.5), detail::percentile(ms, 0.95), 0};
  for (double v : ms) s.mean_ms += v;
  s.mean_ms /= static_cast<double>(ms.size());
  return s;
}

inline BenchReport cmd_bench(const std::string& a, const std::string& b, const BenchOptions& o) {
  if (o.frames < 100) throw InvalidConfigError("bench: frames must be >= 100");
  if (o.warmup < 10) throw InvalidConfigError("bench: warmup must be >= 10");
  if (o.threads < 1) throw InvalidConfigError("bench: threads must be >= 1");
  const int saved = num_threads();
  set_num_threads(o.threads);
  struct Restore {
    int n;
    ~Restore() { set_num_threads(n); }
  } restore{saved};
  UNet ma = bench_model(a, o.seed), mb = bench_model(b, o.seed);
  if (ma.config().input_size != mb.config().input_size) throw InvalidInputError("bench: models differ in input size");
  BenchReport r;
  r.options = o;
  r.a = measure_latency(ma, a, o);
  r.b = measure_latency(mb, b, o);
  r.latency_ratio = r.b.median_ms / r.a.median_ms;
  r.param_ratio = static_cast<double>(r.b.params) / static_cast<double>(r.a.params);
  return r;
}

inline std::string format_bench(const BenchReport& r) {
  std::ostringstream os;
  os << "batch 1, eval mode, forward + argmax, " << r.options.frames << " frames after " << r.options.warmup
     << " warmup, threads " << r.options.threads << "\n";
  for (const LatencyStats* s : {&r.a, &r.b}) {
    os << s->name << ": params " << s->params << ", median " << detail::format_double(s->median_ms) << " ms, p95 "
       << detail::format_double(s->p95_ms) << " ms, mean " << detail::format_double(s->mean_ms) << " ms\n";
  }
  os << "latency ratio (b/a) " << detail::format_double(r.latency_ratio) << "\n";
  os << "parameter ratio (b/a) " << detail::format_double(r.param_ratio) << "\n";
  return os.str();
}

// ------------------------------------------------------------ compare

enum class CompareMetric { dice, hausdorff };

/// Paired two-sided test on per-sample class means. For Hausdorff the mean
/// covers defined values only, and samples without any defined value in
/// either report are left out.
inline WilcoxonResult cmd_compare(const MetricsReport& a, const MetricsReport& b, CompareMetric metric) {
  std::map<std::string, const SampleMetrics*> in_b;
  for (const auto& r : b.records) in_b[r.id] = &r;
  if (a.records.size() != b.records.size()) {
    throw UnpairedDataError("compare: reports hold " + std::to_string(a.records.size()) + " and " +
                            std::to_string(b.records.size()) + " samples");
  }
  std::vector<double> xa, xb;
  for (const auto& ra : a.records) {
    auto it = in_b.find(ra.id);
    if (it == in_b.end()) throw UnpairedDataError("compare: sample '" + ra.id + "' missing from the second report");
    const SampleMetrics& rb = *it->second;
    if (metric == CompareMetric::dice) {
      xa.push_back(ra.mean_dice());
      xb.push_back(rb.mean_dice());
    } else if (ra.mean_hausdorff() && rb.mean_hausdorff()) {
      xa.push_back(*ra.mean_hausdorff());
      xb.push_back(*rb.mean_hausdorff());
    }
  }
  return wilcoxon(xa, xb);
}

inline std::string format_wilcoxon(const WilcoxonResult& r) {
  std::ostringstream os;
  os << "W " << detail::format_double(r.statistic) << "\np " << detail::format_double(r.p_value) << "\nn "
     << r.n_effective << "\nmethod " << (r.n_effective == 0 ? "none" : r.exact ? "exact" : "normal") << "\n";
  return os.str();
}

// ------------------------------------------------------------ ablate

/// Ablation plan, one directive per line:
///   base <preset>                      starting configuration
///   set <section>.<key> = <value>      override shared by every row
///   row <label> : <section>.<key>=<value>; ...
/// Each row applies its own delta to the base. Rows never inherit from
/// earlier rows; write kept components into later deltas explicitly.
struct AblationRow {
  std::string label;
  std::string delta;  // verbatim from the plan
  RunConfig config;
};

struct AblationPlan {
  RunConfig base;
  std::vector<AblationRow> rows;
};

namespace detail {

inline void apply_assignments(RunConfig& cfg, std::string_view list, const std::string& source, std::size_t line) {
  IniFile ini{source, {}};
  std::string_view rest = list;
  while (!rest.empty()) {
    const auto semi = rest.find(';');
    const std::string item = trim(rest.substr(0, semi));
    rest = semi == std::string_view::npos ? std::string_view{} : rest.substr(semi + 1);
    if (item.empty()) continue;
    const auto dot = item.find('.'), eq = item.find('=');
    const std::string where = source + ":" + std::to_string(line);
    if (dot == std::string::npos || eq == std::string::npos || dot > eq) {
      throw ConfigParseError(where + ": expected section.key=value, got '" + item + "'");
    }
    ini.entries.push_back({trim(std::string_view(item).substr(0, dot)),
                           trim(std::string_view(item).substr(dot + 1, eq - dot - 1)),
                           trim(std::string_view(item).substr(eq + 1)), line});
  }
  for (const auto& e : ini.entries) {
    if (e.section == "run" || e.section == "history") {
      throw ConfigParseError(source + ":" + std::to_string(line) + ": [" + e.section + "] cannot be set in a plan");
    }
    apply_entry(cfg, ini, e);
  }
}

}  // namespace detail

inline AblationPlan parse_plan(const std::string& text, const std::string& source = "plan") {
  AblationPlan plan;
  bool have_base = false;
  std::vector<std::pair<std::string, std::string>> shared;  // (assignment, line)
  std::vector<std::tuple<std::string, std::string, std::size_t>> rows;
  std::istringstream is(text);
  std::string raw;
  std::size_t lineno = 0;
  while (std::getline(is, raw)) {
    ++lineno;
    std::string line = raw;
    if (const auto hash = line.find('#'); hash != std::string::npos) line.erase(hash);
    line = detail::trim(line);
    if (line.empty()) continue;
    const std::string where = source + ":" + std::to_string(lineno);
    const auto space = line.find_first_of(" \t");
    const std::string verb = line.substr(0, space);
    const std::string rest = space == std::string::npos ? "" : detail::trim(std::string_view(line).substr(space));
    if (verb == "base") {
      if (have_base) throw ConfigParseError(where + ": base given twice");
      try {
        plan.base = run_presets::by_name(rest);
      } catch (const InvalidConfigError& e) {
        throw ConfigParseError(where + ": " + e.what());
      }
      have_base = true;
    } else if (verb == "set") {
      detail::apply_assignments(plan.base, rest, source, lineno);
    } else if (verb == "row") {
      const auto colon = rest.find(':');
      if (colon == std::string::npos) throw ConfigParseError(where + ": expected 'row <label> : <delta>'");
      const std::string label = detail::trim(std::string_view(rest).substr(0, colon));
      if (label.empty()) throw ConfigParseError(where + ": row label is empty");
      rows.emplace_back(label, detail::trim(std::string_view(rest).substr(colon + 1)), lineno);
    } else {
      throw ConfigParseError(where + ": unknown directive '" + verb + "'");
    }
  }
  if (!have_base) throw ConfigParseError(source + ": plan has no base line");
  if (rows.empty()) throw ConfigParseError(source + ": plan has no rows");
  for (auto& [label, delta, line] : rows) {
    RunConfig cfg = plan.base;
    detail::apply_assignments(cfg, delta, source, line);
    try {
      validate(cfg);
    } catch (const InvalidConfigError& e) {
      throw ConfigParseError(source + ":" + std::to_string(line) + ": " + e.what());
    }
    plan.rows.push_back({label, delta, std::move(cfg)});
  }
  return plan;
}

inline AblationPlan load_plan(const std::string& path) { return parse_plan(detail::read_file(path), path); }

struct AblationResult {
  std::string label, delta;
  MetricsSummary summary;
};

/// Table with per-class Dice and Hausdorff, the outlier count, the verbatim
/// delta and an empty conclusion column.
inline std::string format_ablation(const std::vector<AblationResult>& rows) {
  using detail::format_double;
  auto fixed = [](double v, int digits) {
    if (std::isnan(v)) return std::string("n/a");
    std::ostringstream os;
    os.setf(std::ios::fixed);
    os.precision(digits);
    os << v;
    return os.str();
  };
  std::ostringstream os;
  os << "| Experiment | Dice LV | Dice MYO | Dice LA | Haus. LV | Haus. MYO | Haus. LA | Outliers | Delta | Conclusion |\n";
  os << "|---|---|---|---|---|---|---|---|---|---|\n";
  for (const auto& r : rows) {
    os << "| " << r.label;
    for (double d : r.summary.mean_dice) os << " | " << fixed(d, 3);
    for (double h : r.summary.mean_hausdorff) os << " | " << fixed(h, 2);
    os << " | " << r.summary.outliers << " | " << (r.delta.empty() ? "-" : r.delta) << " |  |\n";
  }
  return os.str();
}

/// Trains and evaluates each plan row with the same seed. Each row writes
/// its outputs under `<out>/row<NN>`; the table goes to `<out>/ablation.md`.
inline std::vector<AblationResult> cmd_ablate(const AblationPlan& plan, const std::string& out,
                                              std::optional<std::uint64_t> seed = std::nullopt) {
  std::vector<AblationResult> results;
  for (std::size_t i = 0; i < plan.rows.size(); ++i) {
    RunConfig cfg = plan.rows[i].config;
    if (seed) cfg.train.seed = *seed;
    char name[16];
    std::snprintf(name, sizeof name, "row%02zu", i + 1);
    cfg.output_dir = (fs::path(out) / name).string();
    const TrainResult r = cmd_train(cfg);
    write_report((fs::path(cfg.output_dir) / "test_report.txt").string(), r.test_report);
    results.push_back({plan.rows[i].label, plan.rows[i].delta, r.test_report.summary()});
  }
  fs::create_directories(out);
  detail::write_file((fs::path(out) / "ablation.md").string(), format_ablation(results));
  return results;
}

}  // namespace echoseg
