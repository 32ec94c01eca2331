#pragma once

// Run configuration, read from JSON. Every object is closed: an unknown key
// is an error, so a typo such as "alpha-g" cannot silently fall back to a
// default. Relative paths are resolved against the config file's directory.

#include <cstdint>
#include <filesystem>
#include <fstream>
#include <optional>
#include <sstream>
#include <string>
#include <type_traits>
#include <vector>

#include <json.hpp>

#include "gravprune/dataset.hpp"
#include "gravprune/error.hpp"
#include "gravprune/gravity.hpp"
#include "gravprune/pruning.hpp"
#include "gravprune/training.hpp"

namespace gravprune {

using Json = nlohmann::json;

struct DatasetConfig {
  std::string format = "synthetic";  // synthetic | cifar10 | cifar100
  SyntheticSpec synthetic;
  std::vector<std::filesystem::path> train_files, test_files;
  bool flip = false;
};

struct SweepConfig {
  std::vector<double> alpha_g{0.0, 10.0, 1e2, 1e4, 1e5};
  std::vector<double> rates{0.0, 0.1, 0.2, 0.3, 0.4, 0.5};
  std::vector<std::uint64_t> seeds{1, 2, 3};
  bool finetune = false;
};

struct RunConfig {
  std::filesystem::path source;  // the config file itself, if any
  DatasetConfig dataset;
  std::filesystem::path model;
  std::optional<std::filesystem::path> init_checkpoint;  // pretrained start
  std::uint64_t seed = 1;
  std::size_t epochs = 10;
  std::size_t batch_size = 64;
  LrSchedule lr;
  GravityConfig gravity;
  bool all_conv = true;  // gravity.prune_layers == "all-conv"
  std::vector<double> rates{0.1, 0.2, 0.3, 0.4, 0.5};
  Rounding rounding = Rounding::floor_removed;
  std::optional<std::size_t> finetune_epochs;  // default: epochs
  std::optional<LrSchedule> finetune_lr;       // default: lr with base / 10
  SweepConfig sweep;
  std::filesystem::path out_dir = "out";
  Json raw;  // normalized document, hashed into run metadata

  TrainOptions train_options(std::uint64_t seed_override) const {
    TrainOptions o;
    o.epochs = epochs;
    o.batch_size = batch_size;
    o.lr = lr;
    o.seed = seed_override;
    o.flip = dataset.flip;
    return o;
  }

  TrainOptions finetune_options() const {
    TrainOptions o = train_options(seed);
    o.epochs = finetune_epochs.value_or(epochs);
    if (finetune_lr) {
      o.lr = *finetune_lr;
    } else {
      o.lr.base /= 10.0;
    }
    return o;
  }
};

namespace detail {

inline void close_object(const Json& j, const std::string& where, std::initializer_list<std::string_view> keys) {
  if (!j.is_object()) throw ConfigError(where + " must be an object");
  for (const auto& [k, v] : j.items()) {
    bool known = false;
    for (auto key : keys) known = known || k == key;
    if (!known) throw ConfigError("unknown key '" + k + "' in " + where);
  }
}

template <typename T>
T get_or(const Json& j, const char* key, T fallback, const std::string& where) {
  if (!j.contains(key)) return fallback;
  if constexpr (std::is_integral_v<T> && !std::is_same_v<T, bool>) {
    const Json& v = j.at(key);
    if (!(v.is_number_unsigned() || (v.is_number_integer() && v.get<std::int64_t>() >= 0)))
      throw ConfigError(where + "." + key + " must be a non-negative integer");
  }
  try {
    return j.at(key).get<T>();
  } catch (const nlohmann::json::exception&) {
    throw ConfigError(where + "." + key + " has the wrong type");
  }
}

inline std::filesystem::path resolve(const std::filesystem::path& base, const std::string& p) {
  std::filesystem::path path(p);
  return path.is_absolute() ? path : base / path;
}

inline LrSchedule parse_lr(const Json& j, const std::string& where) {
  LrSchedule lr;
  if (j.is_number()) {
    lr.base = j.get<double>();
  } else {
    close_object(j, where, {"base", "milestones", "gamma"});
    lr.base = get_or(j, "base", lr.base, where);
    lr.milestones = get_or(j, "milestones", lr.milestones, where);
    lr.gamma = get_or(j, "gamma", lr.gamma, where);
  }
  if (!(lr.base > 0.0)) throw ConfigError(where + ".base must be positive");
  if (!(lr.gamma > 0.0)) throw ConfigError(where + ".gamma must be positive");
  return lr;
}

inline std::vector<double> parse_rates(const Json& j, const std::string& where) {
  std::vector<double> rates;
  try {
    rates = j.get<std::vector<double>>();
  } catch (const nlohmann::json::exception&) {
    throw ConfigError(where + " must be a list of numbers");
  }
  for (double r : rates)
    if (!(r >= 0.0 && r < 1.0)) throw ConfigError(where + " entries must lie in [0, 1)");
  return rates;
}

}  // namespace detail

inline RunConfig parse_run_config(const Json& doc, const std::filesystem::path& base_dir) {
  using detail::get_or;
  RunConfig c;
  detail::close_object(doc, "config", {"dataset", "model", "init_checkpoint", "seed", "epochs", "batch_size", "lr",
                                       "gravity", "pruning", "finetune", "sweep", "out_dir"});

  if (doc.contains("dataset")) {
    const Json& d = doc["dataset"];
    detail::close_object(d, "dataset", {"format", "classes", "train_samples", "test_samples", "channels", "height",
                                        "width", "blobs_per_class", "noise", "jitter", "seed", "train", "test",
                                        "flip"});
    auto& s = c.dataset.synthetic;
    c.dataset.format = get_or<std::string>(d, "format", "synthetic", "dataset");
    c.dataset.flip = get_or(d, "flip", false, "dataset");
    if (c.dataset.format == "synthetic") {
      s.classes = get_or(d, "classes", s.classes, "dataset");
      s.train_samples = get_or(d, "train_samples", s.train_samples, "dataset");
      s.test_samples = get_or(d, "test_samples", s.test_samples, "dataset");
      s.channels = get_or(d, "channels", s.channels, "dataset");
      s.height = get_or(d, "height", s.height, "dataset");
      s.width = get_or(d, "width", s.width, "dataset");
      s.blobs_per_class = get_or(d, "blobs_per_class", s.blobs_per_class, "dataset");
      s.noise = get_or(d, "noise", s.noise, "dataset");
      s.jitter = get_or(d, "jitter", s.jitter, "dataset");
      s.seed = get_or(d, "seed", s.seed, "dataset");
      if (d.contains("train") || d.contains("test")) throw ConfigError("synthetic dataset takes no train/test files");
    } else if (c.dataset.format == "cifar10" || c.dataset.format == "cifar100") {
      for (auto key : {"classes", "train_samples", "test_samples", "channels", "height", "width", "blobs_per_class",
                       "noise", "jitter", "seed"})
        if (d.contains(key)) throw ConfigError(std::string("dataset.") + key + " applies to synthetic data only");
      s.classes = c.dataset.format == "cifar10" ? 10 : 100;
      for (const auto& f : get_or<std::vector<std::string>>(d, "train", {}, "dataset"))
        c.dataset.train_files.push_back(detail::resolve(base_dir, f));
      for (const auto& f : get_or<std::vector<std::string>>(d, "test", {}, "dataset"))
        c.dataset.test_files.push_back(detail::resolve(base_dir, f));
      if (c.dataset.train_files.empty() || c.dataset.test_files.empty())
        throw ConfigError("dataset.train and dataset.test must list CIFAR binary files");
    } else {
      throw ConfigError("dataset.format must be synthetic, cifar10 or cifar100");
    }
  }

  if (!doc.contains("model")) throw ConfigError("config needs a model descriptor path");
  c.model = detail::resolve(base_dir, get_or<std::string>(doc, "model", "", "config"));
  if (doc.contains("init_checkpoint"))
    c.init_checkpoint = detail::resolve(base_dir, get_or<std::string>(doc, "init_checkpoint", "", "config"));
  c.seed = get_or(doc, "seed", c.seed, "config");
  c.epochs = get_or(doc, "epochs", c.epochs, "config");
  c.batch_size = get_or(doc, "batch_size", c.batch_size, "config");
  if (c.epochs < 1) throw ConfigError("epochs must be at least 1");
  if (c.batch_size < 1) throw ConfigError("batch_size must be at least 1");
  if (doc.contains("lr")) c.lr = detail::parse_lr(doc["lr"], "lr");

  if (doc.contains("gravity")) {
    const Json& g = doc["gravity"];
    detail::close_object(g, "gravity", {"G", "alpha_g", "attractor_mode", "prune_layers", "recompute_attractor"});
    c.gravity.G = get_or(g, "G", c.gravity.G, "gravity");
    c.gravity.alpha_g = get_or(g, "alpha_g", c.gravity.alpha_g, "gravity");
    const auto mode = get_or<std::string>(g, "attractor_mode", "max-mass", "gravity");
    if (mode == "max-mass") {
      c.gravity.attractor_mode = AttractorMode::max_mass;
    } else if (mode == "index-zero") {
      c.gravity.attractor_mode = AttractorMode::index_zero;
    } else {
      throw ConfigError("gravity.attractor_mode must be max-mass or index-zero");
    }
    c.gravity.recompute_attractor = get_or(g, "recompute_attractor", true, "gravity");
    if (g.contains("prune_layers")) {
      const Json& pl = g["prune_layers"];
      if (pl.is_string() && pl.get<std::string>() == "all-conv") {
        c.all_conv = true;
      } else if (pl.is_array()) {
        c.all_conv = false;
        c.gravity.prune_layers = get_or<std::vector<std::string>>(g, "prune_layers", {}, "gravity");
      } else {
        throw ConfigError("gravity.prune_layers must be \"all-conv\" or a list of layer names");
      }
    }
    if (!(c.gravity.G > 0.0)) throw ConfigError("gravity.G must be positive");
    if (!(c.gravity.alpha_g >= 0.0)) throw ConfigError("gravity.alpha_g must be non-negative");
  }

  if (doc.contains("pruning")) {
    const Json& p = doc["pruning"];
    detail::close_object(p, "pruning", {"rates", "rounding"});
    if (p.contains("rates")) c.rates = detail::parse_rates(p["rates"], "pruning.rates");
    c.rounding = parse_rounding(get_or<std::string>(p, "rounding", "floor-removed", "pruning"));
  }

  if (doc.contains("finetune")) {
    const Json& f = doc["finetune"];
    detail::close_object(f, "finetune", {"epochs", "lr"});
    if (f.contains("epochs")) c.finetune_epochs = get_or<std::size_t>(f, "epochs", 0, "finetune");
    if (f.contains("lr")) c.finetune_lr = detail::parse_lr(f["lr"], "finetune.lr");
  }

  if (doc.contains("sweep")) {
    const Json& s = doc["sweep"];
    detail::close_object(s, "sweep", {"alpha_g", "rates", "seeds", "finetune"});
    c.sweep.alpha_g = get_or(s, "alpha_g", c.sweep.alpha_g, "sweep");
    if (s.contains("rates")) c.sweep.rates = detail::parse_rates(s["rates"], "sweep.rates");
    c.sweep.seeds = get_or(s, "seeds", c.sweep.seeds, "sweep");
    c.sweep.finetune = get_or(s, "finetune", false, "sweep");
    for (double a : c.sweep.alpha_g)
      if (!(a >= 0.0)) throw ConfigError("sweep.alpha_g entries must be non-negative");
    if (c.sweep.alpha_g.empty() || c.sweep.seeds.empty()) throw ConfigError("sweep needs alpha_g values and seeds");
  }

  c.out_dir = detail::resolve(base_dir, get_or<std::string>(doc, "out_dir", "out", "config"));
  c.raw = doc;
  return c;
}

// Referenced files must exist before any work starts.
inline void check_paths(const RunConfig& c) {
  const auto need = [](const std::filesystem::path& p, const char* what) {
    if (!std::filesystem::exists(p)) throw ConfigError(std::string(what) + " '" + p.string() + "' does not exist");
  };
  need(c.model, "model descriptor");
  if (c.init_checkpoint) need(*c.init_checkpoint, "initial checkpoint");
  for (const auto& f : c.dataset.train_files) need(f, "dataset file");
  for (const auto& f : c.dataset.test_files) need(f, "dataset file");
}

inline RunConfig load_run_config(const std::filesystem::path& path) {
  std::ifstream is(path);
  if (!is) throw ConfigError("cannot open config '" + path.string() + "'");
  Json doc;
  try {
    doc = Json::parse(is);
  } catch (const nlohmann::json::parse_error& e) {
    throw ConfigError("config '" + path.string() + "' is not valid JSON: " + e.what());
  }
  RunConfig c = parse_run_config(doc, path.parent_path());
  c.source = path;
  return c;
}

struct Overrides {
  std::optional<double> alpha_g;
  std::optional<double> prune_rate;
  std::optional<std::uint64_t> seed;
  std::optional<std::filesystem::path> out_dir;
};

// Command-line overrides replace config values and are folded into the
// normalized document so the config hash reflects them.
inline void apply_overrides(RunConfig& c, const Overrides& o) {
  if (o.alpha_g) {
    if (!(*o.alpha_g >= 0.0)) throw ConfigError("--alpha-g must be non-negative");
    c.gravity.alpha_g = *o.alpha_g;
    c.raw["gravity"]["alpha_g"] = *o.alpha_g;
  }
  if (o.prune_rate) {
    if (!(*o.prune_rate >= 0.0 && *o.prune_rate < 1.0)) throw ConfigError("--prune-rate must lie in [0, 1)");
    c.rates = {*o.prune_rate};
    c.raw["pruning"]["rates"] = c.rates;
  }
  if (o.seed) {
    c.seed = *o.seed;
    c.raw["seed"] = *o.seed;
  }
  if (o.out_dir) c.out_dir = *o.out_dir;
}

// FNV-1a of the normalized document. The output directory is left out so
// the same experiment written to two places hashes the same.
inline std::string config_hash(const RunConfig& c) {
  Json doc = c.raw;
  if (doc.is_object()) doc.erase("out_dir");
  std::uint64_t h = 0xcbf29ce484222325ULL;
  for (unsigned char ch : doc.dump()) {
    h ^= ch;
    h *= 0x100000001b3ULL;
  }
  std::ostringstream os;
  os << std::hex;
  os.width(16);
  os.fill('0');
  os << h;
  return os.str();
}

}  // namespace gravprune
