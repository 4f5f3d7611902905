#pragma once

// Run configuration files: flat `key = value` lines grouped under
// `[section]` headers, `#` starts a comment. The optional `[run] preset`
// key selects a named starting point; every other key overrides it.
//
//   [run]          preset
//   [model]        channels, final_channels, input_size, min_resolution,
//                  downsampling, upsampling, normalization, activation,
//                  deep_supervision, residual
//   [train]        epochs, patience, lr, batch_size, scheduler,
//                  plateau_factor, plateau_patience, min_lr, loss,
//                  augmentation, ds_lambda, seed, threads, target_train_dice
//   [data]         path, phantoms, phantom_seed, phantom_size, myocardium,
//                  split, split_seed
//   [postprocess]  cca, morphology, radius
//   [output]       dir

#include <algorithm>
#include <charconv>
#include <cstdint>
#include <fstream>
#include <optional>
#include <sstream>
#include <string>
#include <string_view>
#include <vector>

#include "echoseg/augmentation.hpp"
#include "echoseg/dataset.hpp"
#include "echoseg/error.hpp"
#include "echoseg/losses.hpp"
#include "echoseg/model.hpp"
#include "echoseg/postprocess.hpp"
#include "echoseg/trainer.hpp"

namespace echoseg {

struct IniEntry {
  std::string section, key, value;
  std::size_t line = 0;
};

struct IniFile {
  std::string source;
  std::vector<IniEntry> entries;

  std::optional<std::string> get(std::string_view section, std::string_view key) const {
    std::optional<std::string> v;
    for (const auto& e : entries) {
      if (e.section == section && e.key == key) v = e.value;
    }
    return v;
  }
};

namespace detail {
inline std::string trim(std::string_view s) {
  const auto b = s.find_first_not_of(" \t\r");
  if (b == std::string_view::npos) return {};
  const auto e = s.find_last_not_of(" \t\r");
  return std::string(s.substr(b, e - b + 1));
}
}  // namespace detail

inline IniFile parse_ini(const std::string& text, const std::string& source = "config") {
  IniFile ini{source, {}};
  std::istringstream is(text);
  std::string raw, section;
  std::size_t lineno = 0;
  while (std::getline(is, raw)) {
    ++lineno;
    std::string line = raw;
    if (const auto hash = line.find('#'); hash != std::string::npos) line.erase(hash);
    line = detail::trim(line);
    if (line.empty()) continue;
    const std::string where = source + ":" + std::to_string(lineno);
    if (line.front() == '[') {
      if (line.back() != ']' || line.size() < 3) throw ConfigParseError(where + ": malformed section header '" + line + "'");
      section = detail::trim(std::string_view(line).substr(1, line.size() - 2));
      continue;
    }
    const auto eq = line.find('=');
    if (eq == std::string::npos) throw ConfigParseError(where + ": expected 'key = value', got '" + line + "'");
    if (section.empty()) throw ConfigParseError(where + ": key outside of any [section]");
    IniEntry e{section, detail::trim(std::string_view(line).substr(0, eq)),
               detail::trim(std::string_view(line).substr(eq + 1)), lineno};
    if (e.key.empty()) throw ConfigParseError(where + ": empty key");
    ini.entries.push_back(std::move(e));
  }
  return ini;
}

inline IniFile read_ini(const std::string& path) { return parse_ini(detail::read_file(path), path); }

// ------------------------------------------------------------ RunConfig

enum class SplitMode { standard, all };

struct DataSpec {
  std::string path;            // dataset directory; empty means phantoms
  std::size_t phantoms = 0;    // number of phantom frames when path is empty
  std::uint64_t phantom_seed = 1;
  std::size_t phantom_size = 256;
  bool thick_myocardium = false;
  SplitMode split = SplitMode::standard;
  std::uint64_t split_seed = 1;

  PhantomOptions phantom_options() const {
    PhantomOptions o;
    o.size = phantom_size;
    return thick_myocardium ? echoseg::thick_myocardium(o) : o;
  }

  bool operator==(const DataSpec&) const = default;
};

struct RunConfig {
  std::string preset = "final-lw";
  ModelConfig model;
  TrainConfig train;
  PostprocessConfig postprocess;
  DataSpec data;
  std::string output_dir = "out";

  bool operator==(const RunConfig&) const = default;
};

// Token tables shared by the parser and the writer.
inline std::string_view to_string(LossKind k) {
  switch (k) {
    case LossKind::dice: return "dice";
    case LossKind::cross_entropy: return "ce";
    case LossKind::dice_ce_avg: return "dice-ce-avg";
    case LossKind::dice_ce_sum: return "dice-ce-sum";
  }
  return "?";
}

namespace run_presets {

inline RunConfig base(std::string name, ModelConfig model) {
  RunConfig r;
  r.preset = std::move(name);
  r.model = std::move(model);
  return r;
}

/// Lightweight model: maxpool/nearest, batch norm, Mish, deep supervision,
/// affine augmentation, averaged Dice+CE, largest-component filtering.
inline RunConfig final_lw() {
  RunConfig r = base("final-lw", presets::final_lw());
  r.train.loss = LossKind::dice_ce_avg;
  r.train.augmentation = augment_presets::affine();
  r.postprocess.keep_largest = true;
  return r;
}

/// The plain U-Net 1 baseline: no normalization, Dice loss, no augmentation.
inline RunConfig unet1_baseline() {
  RunConfig r = base("unet1-baseline", presets::unet1());
  r.train.loss = LossKind::dice;
  r.train.augmentation = augment_presets::none();
  r.postprocess.keep_largest = false;
  return r;
}

/// Reference configuration modelled on the self-configuring framework.
inline RunConfig nnunet_like() {
  RunConfig r = base("nnunet-like", presets::nnunet_like());
  r.train.loss = LossKind::dice_ce_sum;
  r.train.augmentation = augment_presets::nnunet_like();
  r.train.batch_size = 32;
  r.postprocess.keep_largest = true;
  return r;
}

/// Size variants share normalization, loss and augmentation with U-Net 1
/// and use a plateau scheduler.
inline RunConfig size_variant(std::string name, ModelConfig model, std::size_t batch) {
  RunConfig r = base(std::move(name), std::move(model));
  r.train.loss = LossKind::dice;
  r.train.batch_size = batch;
  r.train.plateau = PlateauOptions{};
  r.postprocess.keep_largest = false;
  return r;
}

/// Memorization check: final-lw on 8 phantoms, trained and validated on the
/// same unaugmented frames until the training Dice reaches 0.95.
inline RunConfig overfit() {
  RunConfig r = final_lw();
  r.preset = "overfit";
  r.train.augmentation = augment_presets::none();
  r.train.epochs = 200;
  r.train.patience = 200;
  r.train.batch_size = 4;
  r.train.target_train_dice = 0.95;
  r.data.phantoms = 8;
  r.data.phantom_seed = 11;
  r.data.split = SplitMode::all;
  return r;
}

inline const std::vector<std::string>& names() {
  static const std::vector<std::string> n{"final-lw", "unet1-baseline", "nnunet-like", "unet0",
                                          "unet2",    "unet3",          "overfit"};
  return n;
}

inline RunConfig by_name(std::string_view name) {
  if (name == "final-lw") return final_lw();
  if (name == "unet1-baseline") return unet1_baseline();
  if (name == "nnunet-like") return nnunet_like();
  if (name == "unet0") return size_variant("unet0", presets::unet0(), 64);
  if (name == "unet2") return size_variant("unet2", presets::unet2(), 16);
  if (name == "unet3") return size_variant("unet3", presets::unet3(), 8);
  if (name == "overfit") return overfit();
  std::string list;
  for (const auto& n : names()) list += (list.empty() ? "" : ", ") + n;
  throw InvalidConfigError("unknown preset '" + std::string(name) + "' (available: " + list + ")");
}

}  // namespace run_presets

namespace detail {

class ValueParser {
 public:
  ValueParser(const IniFile& ini, const IniEntry& e) : where_(ini.source + ":" + std::to_string(e.line)), e_(e) {}

  [[noreturn]] void fail(const std::string& why) const {
    throw ConfigParseError(where_ + ": [" + e_.section + "] " + e_.key + ": " + why);
  }

  template <class U>
  U integer() const {
    U v{};
    auto [end, ec] = std::from_chars(e_.value.data(), e_.value.data() + e_.value.size(), v);
    if (ec != std::errc() || end != e_.value.data() + e_.value.size()) fail("expected an integer, got '" + e_.value + "'");
    return v;
  }
  double real() const {
    double v = 0;
    auto [end, ec] = std::from_chars(e_.value.data(), e_.value.data() + e_.value.size(), v);
    if (ec != std::errc() || end != e_.value.data() + e_.value.size()) fail("expected a number, got '" + e_.value + "'");
    return v;
  }
  bool boolean() const {
    const std::string& v = e_.value;
    if (v == "true" || v == "yes" || v == "on" || v == "1") return true;
    if (v == "false" || v == "no" || v == "off" || v == "0") return false;
    fail("expected true/false, got '" + v + "'");
  }
  template <class E, std::size_t N>
  E choice(const std::pair<std::string_view, E> (&options)[N]) const {
    for (const auto& [name, value] : options) {
      if (e_.value == name) return value;
    }
    std::string list;
    for (const auto& [name, value] : options) list += (list.empty() ? "" : ", ") + std::string(name);
    fail("unknown value '" + e_.value + "' (expected one of: " + list + ")");
  }
  std::vector<std::size_t> size_list() const {
    std::vector<std::size_t> out;
    std::string_view rest = e_.value;
    while (!rest.empty()) {
      const auto comma = rest.find(',');
      const std::string item = trim(rest.substr(0, comma));
      std::size_t v = 0;
      auto [end, ec] = std::from_chars(item.data(), item.data() + item.size(), v);
      if (item.empty() || ec != std::errc() || end != item.data() + item.size()) fail("bad list item '" + item + "'");
      out.push_back(v);
      if (comma == std::string_view::npos) break;
      rest = rest.substr(comma + 1);
    }
    if (out.empty()) fail("empty list");
    return out;
  }
  const std::string& text() const { return e_.value; }

 private:
  std::string where_;
  const IniEntry& e_;
};

inline constexpr std::pair<std::string_view, Downsampling> kDownsampling[] = {
    {"maxpool", Downsampling::maxpool}, {"strided-conv", Downsampling::strided_conv}};
inline constexpr std::pair<std::string_view, Upsampling> kUpsampling[] = {
    {"nearest", Upsampling::nearest}, {"transposed-conv", Upsampling::transposed_conv}};
inline constexpr std::pair<std::string_view, Normalization> kNormalization[] = {
    {"none", Normalization::none}, {"batch", Normalization::batch}, {"instance", Normalization::instance}};
inline constexpr std::pair<std::string_view, Activation> kActivation[] = {{"relu", Activation::relu},
                                                                          {"leaky-relu", Activation::leaky_relu},
                                                                          {"mish", Activation::mish},
                                                                          {"gelu", Activation::gelu}};
inline constexpr std::pair<std::string_view, LossKind> kLoss[] = {{"dice", LossKind::dice},
                                                                  {"ce", LossKind::cross_entropy},
                                                                  {"dice-ce-avg", LossKind::dice_ce_avg},
                                                                  {"dice-ce-sum", LossKind::dice_ce_sum}};
inline constexpr std::pair<std::string_view, SplitMode> kSplit[] = {{"standard", SplitMode::standard},
                                                                    {"all", SplitMode::all}};
inline constexpr std::pair<std::string_view, int> kMorph[] = {{"none", 0}, {"open", 1}, {"close", 2}};
inline constexpr std::pair<std::string_view, bool> kScheduler[] = {{"none", false}, {"plateau", true}};
inline constexpr std::pair<std::string_view, bool> kMyocardium[] = {{"thin", false}, {"thick", true}};

}  // namespace detail

/// Applies one `[section] key = value` override. Unknown keys are errors.
inline void apply_entry(RunConfig& r, const IniFile& ini, const IniEntry& e) {
  const detail::ValueParser v(ini, e);
  auto plateau = [&]() -> PlateauOptions& {
    if (!r.train.plateau) r.train.plateau = PlateauOptions{};
    return *r.train.plateau;
  };
  const std::string& s = e.section;
  const std::string& k = e.key;
  if (s == "run") {
    if (k != "preset") v.fail("unknown key");
  } else if (s == "model") {
    ModelConfig& m = r.model;
    if (k == "channels") m.encoder_channels = v.size_list();
    else if (k == "final_channels") m.final_channels = v.integer<std::size_t>();
    else if (k == "input_size") m.input_size = v.integer<std::size_t>();
    else if (k == "min_resolution") m.min_resolution = v.integer<std::size_t>();
    else if (k == "downsampling") m.downsampling = v.choice(detail::kDownsampling);
    else if (k == "upsampling") m.upsampling = v.choice(detail::kUpsampling);
    else if (k == "normalization") m.normalization = v.choice(detail::kNormalization);
    else if (k == "activation") m.activation = v.choice(detail::kActivation);
    else if (k == "deep_supervision") m.deep_supervision = v.boolean();
    else if (k == "residual") m.residual = v.boolean();
    else v.fail("unknown key");
  } else if (s == "train") {
    TrainConfig& t = r.train;
    if (k == "epochs") t.epochs = v.integer<std::size_t>();
    else if (k == "patience") t.patience = v.integer<std::size_t>();
    else if (k == "lr") t.lr = v.real();
    else if (k == "batch_size") t.batch_size = v.integer<std::size_t>();
    else if (k == "scheduler") {
      if (v.choice(detail::kScheduler)) plateau();
      else t.plateau.reset();
    } else if (k == "plateau_factor") plateau().factor = v.real();
    else if (k == "plateau_patience") plateau().patience = v.integer<std::size_t>();
    else if (k == "min_lr") plateau().min_lr = v.real();
    else if (k == "loss") t.loss = v.choice(detail::kLoss);
    else if (k == "augmentation") {
      try {
        t.augmentation = augment_presets::by_name(v.text());
      } catch (const InvalidConfigError& err) {
        v.fail(err.what());
      }
    } else if (k == "ds_lambda") t.ds_lambda = v.real();
    else if (k == "seed") t.seed = v.integer<std::uint64_t>();
    else if (k == "threads") t.threads = v.integer<int>();
    else if (k == "target_train_dice") {
      if (v.text() == "none") t.target_train_dice.reset();
      else t.target_train_dice = v.real();
    } else v.fail("unknown key");
  } else if (s == "data") {
    DataSpec& d = r.data;
    if (k == "path") d.path = v.text();
    else if (k == "phantoms") d.phantoms = v.integer<std::size_t>();
    else if (k == "phantom_seed") d.phantom_seed = v.integer<std::uint64_t>();
    else if (k == "phantom_size") d.phantom_size = v.integer<std::size_t>();
    else if (k == "myocardium") d.thick_myocardium = v.choice(detail::kMyocardium);
    else if (k == "split") d.split = v.choice(detail::kSplit);
    else if (k == "split_seed") d.split_seed = v.integer<std::uint64_t>();
    else v.fail("unknown key");
  } else if (s == "postprocess") {
    PostprocessConfig& p = r.postprocess;
    if (k == "cca") p.keep_largest = v.boolean();
    else if (k == "morphology") {
      const int m = v.choice(detail::kMorph);
      p.morphology = m == 0 ? std::nullopt : std::optional<MorphOp>(m == 1 ? MorphOp::open : MorphOp::close);
    } else if (k == "radius") p.radius = v.integer<std::size_t>();
    else v.fail("unknown key");
  } else if (s == "output") {
    if (k == "dir") r.output_dir = v.text();
    else v.fail("unknown key");
  } else if (s == "history") {
    // Written into checkpoint sidecars; not a run setting.
  } else {
    v.fail("unknown section");
  }
}

inline void validate(const RunConfig& r) {
  r.model.validate();
  r.train.validate(r.model.normalization == Normalization::batch);
  if (r.data.path.empty() && r.data.phantoms == 0) {
    throw InvalidConfigError("data: set either path or phantoms");
  }
  if (r.postprocess.morphology && r.postprocess.radius < 1) throw InvalidConfigError("postprocess: radius must be >= 1");
}

inline RunConfig run_config_from(const IniFile& ini) {
  RunConfig r;
  try {
    r = run_presets::by_name(ini.get("run", "preset").value_or("final-lw"));
  } catch (const InvalidConfigError& e) {
    throw ConfigParseError(ini.source + ": " + e.what());
  }
  for (const auto& e : ini.entries) apply_entry(r, ini, e);
  validate(r);
  return r;
}

inline RunConfig parse_run_config(const std::string& text, const std::string& source = "config") {
  return run_config_from(parse_ini(text, source));
}

inline RunConfig load_run_config(const std::string& path) { return run_config_from(read_ini(path)); }

namespace detail {
inline std::string fmt(double v) { return format_double(v); }
}  // namespace detail

/// Writes every setting explicitly, so the text reproduces the config
/// without relying on preset defaults.
inline std::string format_run_config(const RunConfig& r) {
  std::ostringstream os;
  const ModelConfig& m = r.model;
  os << "[run]\npreset = " << r.preset << "\n\n[model]\nchannels = ";
  for (std::size_t i = 0; i < m.encoder_channels.size(); ++i) os << (i ? "," : "") << m.encoder_channels[i];
  os << "\nfinal_channels = " << m.final_channels << "\ninput_size = " << m.input_size
     << "\nmin_resolution = " << m.min_resolution << "\ndownsampling = " << to_string(m.downsampling)
     << "\nupsampling = " << to_string(m.upsampling) << "\nnormalization = " << to_string(m.normalization)
     << "\nactivation = " << to_string(m.activation) << "\ndeep_supervision = " << (m.deep_supervision ? "true" : "false")
     << "\nresidual = " << (m.residual ? "true" : "false") << "\n\n";
  const TrainConfig& t = r.train;
  os << "[train]\nepochs = " << t.epochs << "\npatience = " << t.patience << "\nlr = " << detail::fmt(t.lr)
     << "\nbatch_size = " << t.batch_size << "\nscheduler = " << (t.plateau ? "plateau" : "none") << "\n";
  if (t.plateau) {
    os << "plateau_factor = " << detail::fmt(t.plateau->factor) << "\nplateau_patience = " << t.plateau->patience
       << "\nmin_lr = " << detail::fmt(t.plateau->min_lr) << "\n";
  }
  os << "loss = " << to_string(t.loss) << "\naugmentation = " << t.augmentation.name
     << "\nds_lambda = " << detail::fmt(t.ds_lambda) << "\nseed = " << t.seed << "\nthreads = " << t.threads
     << "\ntarget_train_dice = " << (t.target_train_dice ? detail::fmt(*t.target_train_dice) : "none") << "\n\n";
  const DataSpec& d = r.data;
  os << "[data]\n";
  if (!d.path.empty()) os << "path = " << d.path << "\n";
  os << "phantoms = " << d.phantoms << "\nphantom_seed = " << d.phantom_seed << "\nphantom_size = " << d.phantom_size
     << "\nmyocardium = " << (d.thick_myocardium ? "thick" : "thin")
     << "\nsplit = " << (d.split == SplitMode::all ? "all" : "standard") << "\nsplit_seed = " << d.split_seed << "\n\n";
  const PostprocessConfig& p = r.postprocess;
  os << "[postprocess]\ncca = " << (p.keep_largest ? "true" : "false") << "\nmorphology = "
     << (!p.morphology ? "none" : *p.morphology == MorphOp::open ? "open" : "close") << "\nradius = " << p.radius
     << "\n\n[output]\ndir = " << r.output_dir << "\n";
  return os.str();
}

}  // namespace echoseg
