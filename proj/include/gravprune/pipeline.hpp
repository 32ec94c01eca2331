#pragma once

// Experiment commands behind the CLI: train, prune, finetune, sweep and
// analyze. Each writes its artifacts under the configured output directory
// and returns an in-memory summary for callers such as the tests.

#include <algorithm>
#include <chrono>
#include <cmath>
#include <cstdio>
#include <filesystem>
#include <fstream>
#include <iomanip>
#include <numeric>
#include <optional>
#include <ostream>
#include <sstream>
#include <string>
#include <vector>

#include "gravprune/checkpoint.hpp"
#include "gravprune/config.hpp"
#include "gravprune/cost.hpp"
#include "gravprune/dataset.hpp"
#include "gravprune/gravity.hpp"
#include "gravprune/pruning.hpp"
#include "gravprune/training.hpp"

namespace gravprune {

inline constexpr const char* kVersion = "0.1.0";
inline constexpr int kPlanFormatVersion = 1;

// ---------------------------------------------------------------- helpers

inline std::string fmt(double v, int precision = 6) {
  std::ostringstream os;
  os << std::setprecision(precision) << v;
  return os.str();
}

inline std::string fixed2(double v) {
  std::ostringstream os;
  os << std::fixed << std::setprecision(2) << v;
  return os.str();
}

// 0.3 -> "30", 0.125 -> "12.5"
inline std::string rate_tag(double rate) {
  char buf[32];
  std::snprintf(buf, sizeof buf, "%g", rate * 100.0);
  return buf;
}

inline double median(std::vector<double> v) {
  if (v.empty()) return std::nan("");
  std::sort(v.begin(), v.end());
  const std::size_t n = v.size();
  return n % 2 ? v[n / 2] : 0.5 * (v[n / 2 - 1] + v[n / 2]);
}

// Spearman rank correlation; tied values share their average rank.
inline double spearman_rank(const std::vector<double>& x, const std::vector<double>& y) {
  if (x.size() != y.size()) throw ContractError("spearman inputs differ in length");
  if (x.size() < 2) return std::nan("");
  const auto ranks = [](const std::vector<double>& v) {
    std::vector<std::size_t> idx(v.size());
    std::iota(idx.begin(), idx.end(), 0);
    std::stable_sort(idx.begin(), idx.end(), [&](auto a, auto b) { return v[a] < v[b]; });
    std::vector<double> r(v.size());
    for (std::size_t i = 0; i < idx.size();) {
      std::size_t j = i;
      while (j + 1 < idx.size() && v[idx[j + 1]] == v[idx[i]]) ++j;
      for (std::size_t k = i; k <= j; ++k) r[idx[k]] = 0.5 * static_cast<double>(i + j) + 1.0;
      i = j + 1;
    }
    return r;
  };
  const auto rx = ranks(x), ry = ranks(y);
  const double mean = 0.5 * static_cast<double>(x.size() + 1);
  double sxy = 0, sxx = 0, syy = 0;
  for (std::size_t i = 0; i < x.size(); ++i) {
    sxy += (rx[i] - mean) * (ry[i] - mean);
    sxx += (rx[i] - mean) * (rx[i] - mean);
    syy += (ry[i] - mean) * (ry[i] - mean);
  }
  if (sxx == 0 || syy == 0) return std::nan("");
  return sxy / std::sqrt(sxx * syy);
}

// Correlation between filter mass and index distance to the attractor,
// over the non-attractor filters of one layer.
inline double mass_distance_correlation(const LayerGravityState& st) {
  std::vector<double> gap, mass;
  for (std::size_t n = 0; n < st.masses.size(); ++n) {
    if (n == st.attractor) continue;
    gap.push_back(std::abs(static_cast<double>(n) - static_cast<double>(st.attractor)));
    mass.push_back(st.masses[n]);
  }
  return spearman_rank(gap, mass);
}

class OutputFile {
public:
  explicit OutputFile(const std::filesystem::path& path) : path_(path) {
    if (path.has_parent_path()) std::filesystem::create_directories(path.parent_path());
    os_.open(path, std::ios::trunc);
    if (!os_) throw IoError("cannot open '" + path.string() + "' for writing");
  }
  std::ostream& stream() { return os_; }
  void flush() {
    os_.flush();
    if (!os_) throw IoError("write to '" + path_.string() + "' failed");
  }
  ~OutputFile() { os_.flush(); }

private:
  std::filesystem::path path_;
  std::ofstream os_;
};

inline void write_json(const std::filesystem::path& path, const Json& j) {
  OutputFile f(path);
  f.stream() << j.dump(2) << '\n';
  f.flush();
}

// ---------------------------------------------------------------- inputs

inline DatasetSplit load_dataset(const RunConfig& cfg) {
  if (cfg.dataset.format == "synthetic") return make_synthetic(cfg.dataset.synthetic);
  const std::size_t classes = cfg.dataset.synthetic.classes;
  const std::size_t label_bytes = cfg.dataset.format == "cifar100" ? 2 : 1;
  DatasetSplit split;
  for (const auto& f : cfg.dataset.train_files) split.train.append(load_cifar_file(f, classes, label_bytes));
  for (const auto& f : cfg.dataset.test_files) split.test.append(load_cifar_file(f, classes, label_bytes));
  Dataset* targets[] = {&split.train, &split.test};
  normalize_channels(split.train, targets);
  return split;
}

inline std::string read_descriptor_file(const std::filesystem::path& path) {
  std::ifstream is(path);
  if (!is) throw ConfigError("cannot open model descriptor '" + path.string() + "'");
  std::stringstream ss;
  ss << is.rdbuf();
  return ss.str();
}

// Random initialization ("r") from the descriptor, or a pretrained start
// ("p") from a checkpoint whose architecture must match the descriptor.
inline Model initial_model(const RunConfig& cfg, std::uint64_t seed) {
  ArchDescriptor arch = parse_descriptor(read_descriptor_file(cfg.model));
  if (!cfg.init_checkpoint) return build_model<float>(arch, seed);
  Model m = load_checkpoint(*cfg.init_checkpoint);
  infer_shapes(arch);
  if (!(m.arch == arch))
    throw ConfigError("initial checkpoint architecture differs from '" + cfg.model.string() + "'");
  return m;
}

// The set L: listed layers, or "all-conv" = every prunable conv of the
// default scope.
inline std::vector<std::string> resolve_prune_layers(const RunConfig& cfg, const Model& model) {
  if (cfg.all_conv) return default_prune_scope(model);
  for (const auto& name : cfg.gravity.prune_layers) {
    const int idx = model.index_of(name);
    if (idx < 0) throw ConfigError("prune layer '" + name + "' does not exist");
    if (!is_prunable(model, static_cast<std::size_t>(idx)))
      throw ConfigError("layer '" + name + "' is not prunable: " + channel_group(model, idx).reason);
  }
  return cfg.gravity.prune_layers;
}

inline GravityConfig gravity_for(const RunConfig& cfg, const Model& model, double alpha_g) {
  GravityConfig g = cfg.gravity;
  g.alpha_g = alpha_g;
  g.prune_layers = resolve_prune_layers(cfg, model);
  return g;
}

// ---------------------------------------------------------------- plan files

inline Json plan_to_json(const PruningPlan& plan) {
  Json layers = Json::array();
  for (const auto& lp : plan.layers)
    layers.push_back({{"layer", lp.layer}, {"filters", lp.keep.size()}, {"kept", lp.kept_indices()},
                      {"scores", lp.scores}});
  return {{"format", "gravprune-plan"},
          {"version", kPlanFormatVersion},
          {"rate", plan.rate},
          {"rounding", std::string(rounding_name(plan.rounding))},
          {"layers", layers}};
}

inline PruningPlan plan_from_json(const Json& j) {
  try {
    if (j.at("format") != "gravprune-plan") throw FormatError("not a pruning plan");
    const int version = j.at("version").get<int>();
    if (version != kPlanFormatVersion)
      throw VersionError("plan format version " + std::to_string(version) + " is not supported");
    PruningPlan plan;
    plan.rate = j.at("rate").get<double>();
    plan.rounding = parse_rounding(j.at("rounding").get<std::string>());
    for (const auto& l : j.at("layers")) {
      LayerPlan lp;
      lp.layer = l.at("layer").get<std::string>();
      lp.keep.assign(l.at("filters").get<std::size_t>(), false);
      for (std::size_t k : l.at("kept").get<std::vector<std::size_t>>()) {
        if (k >= lp.keep.size()) throw FormatError("plan keeps filter " + std::to_string(k) + " of " + lp.layer);
        lp.keep[k] = true;
      }
      lp.scores = l.at("scores").get<std::vector<double>>();
      plan.layers.push_back(std::move(lp));
    }
    return plan;
  } catch (const nlohmann::json::exception& e) {
    throw FormatError(std::string("malformed plan: ") + e.what());
  } catch (const ConfigError& e) {
    throw FormatError(std::string("malformed plan: ") + e.what());
  }
}

inline void write_plan_file(const std::filesystem::path& path, const PruningPlan& plan) {
  write_json(path, plan_to_json(plan));
}

inline PruningPlan read_plan_file(const std::filesystem::path& path) {
  std::ifstream is(path);
  if (!is) throw IoError("cannot open plan '" + path.string() + "'");
  try {
    return plan_from_json(Json::parse(is));
  } catch (const nlohmann::json::parse_error& e) {
    throw FormatError("plan '" + path.string() + "' is not valid JSON: " + e.what());
  }
}

inline Json run_metadata(const RunConfig& cfg, const std::string& command) {
  return {{"command", command},
          {"version", kVersion},
          {"checkpoint_format", kCheckpointVersion},
          {"plan_format", kPlanFormatVersion},
          {"config_hash", config_hash(cfg)},
          {"config", cfg.raw},
          {"seed", cfg.seed}};
}

// ---------------------------------------------------------------- train

struct TrainSummary {
  std::filesystem::path checkpoint;
  std::vector<EpochLog> epochs;
  std::vector<std::string> prune_layers;
  double seconds = 0.0;
};

inline void write_force_rows(std::ostream& os, const EpochLog& log) {
  for (const auto& l : log.layers)
    for (std::size_t n = 0; n < l.state.masses.size(); ++n)
      os << log.epoch << ',' << l.layer << ',' << n << ',' << fmt(l.state.masses[n], 9) << ','
         << (n == l.state.attractor ? std::string("inf") : fmt(l.state.distances[n], 9)) << ','
         << fmt(l.state.forces[n], 9) << '\n';
}

// Gravity training from the configured start. Writes model.gprn, the
// per-epoch log (train_log.csv), the per-filter force log (forces.csv) and
// run_train.json.
inline TrainSummary cmd_train(const RunConfig& cfg, std::ostream* progress = nullptr) {
  check_paths(cfg);
  const auto t0 = std::chrono::steady_clock::now();
  const DatasetSplit data = load_dataset(cfg);
  Model model = initial_model(cfg, cfg.seed);
  const GravityConfig gravity = gravity_for(cfg, model, cfg.gravity.alpha_g);

  std::filesystem::create_directories(cfg.out_dir);
  OutputFile log(cfg.out_dir / "train_log.csv"), forces(cfg.out_dir / "forces.csv");
  log.stream() << "epoch,loss,train_accuracy,test_accuracy,seconds";
  for (const auto& l : gravity.prune_layers) log.stream() << ",force_" << l;
  log.stream() << '\n';
  forces.stream() << "epoch,layer_id,filter_index,mass,distance,force\n";

  TrainSummary summary;
  summary.prune_layers = gravity.prune_layers;
  const auto result = train_with_gravity(model, data.train, gravity, cfg.train_options(cfg.seed), &data.test,
                                         [&](const EpochLog& e) {
                                           log.stream() << e.epoch << ',' << fmt(e.loss, 9) << ','
                                                        << fixed2(e.train_accuracy) << ',' << fixed2(e.test_accuracy)
                                                        << ',' << fmt(e.seconds, 4);
                                           for (const auto& l : e.layers) log.stream() << ',' << fmt(l.state.total_force, 9);
                                           log.stream() << '\n';
                                           log.flush();
                                           write_force_rows(forces.stream(), e);
                                           forces.flush();
                                           if (progress)
                                             *progress << "epoch " << e.epoch << " loss " << fmt(e.loss, 5)
                                                       << " test " << fixed2(e.test_accuracy) << "%\n";
                                         });
  summary.epochs = result.epochs;
  summary.checkpoint = cfg.out_dir / "model.gprn";
  save_checkpoint(model, summary.checkpoint, {cfg.epochs, cfg.seed, gravity_config_hash(gravity)});
  summary.seconds = std::chrono::duration<double>(std::chrono::steady_clock::now() - t0).count();

  Json meta = run_metadata(cfg, "train");
  meta["alpha_g"] = gravity.alpha_g;
  meta["prune_layers"] = gravity.prune_layers;
  meta["attractor_mode"] = std::string(attractor_mode_name(gravity.attractor_mode));
  meta["gravity_hash"] = gravity_config_hash(gravity);
  meta["steps"] = result.steps;
  meta["final_test_accuracy"] = result.epochs.back().test_accuracy;
  meta["seconds"] = summary.seconds;
  write_json(cfg.out_dir / "run_train.json", meta);
  return summary;
}

// ---------------------------------------------------------------- prune

struct PruneOutput {
  double rate = 0.0;
  std::filesystem::path checkpoint;
  PruningPlan plan;
  CostReport cost;
  Ratios ratios;
  double accuracy = std::nan("");
};

struct PruneSummary {
  CostReport base;
  double base_accuracy = std::nan("");
  std::vector<PruneOutput> outputs;
  std::uint64_t optimizer_steps = 0;
};

// Prunes one frozen checkpoint at every configured rate. Every output is
// derived from the same loaded model; no optimizer step runs in here.
inline PruneSummary cmd_prune(const RunConfig& cfg, const std::filesystem::path& checkpoint, bool evaluate = true,
                              std::ostream* progress = nullptr) {
  check_paths(cfg);
  const auto steps_before = optimizer_step_counter().load();
  const Model model = load_checkpoint(checkpoint);
  const auto layers = resolve_prune_layers(cfg, model);
  std::optional<DatasetSplit> data;
  if (evaluate) data = load_dataset(cfg);

  PruneSummary summary;
  summary.base = cost_model(model);
  if (data) summary.base_accuracy = evaluate_accuracy(model, data->test);
  std::filesystem::create_directories(cfg.out_dir);
  {
    OutputFile base(cfg.out_dir / "cost_base.csv");
    write_cost_csv(base.stream(), summary.base);
    base.flush();
  }
  OutputFile table(cfg.out_dir / "prune_summary.csv");
  table.stream() << "rate,params,flops,speedup,compression,accuracy\n";
  table.stream() << "0," << summary.base.total_params << ',' << summary.base.total_flops << ",1,1,"
                 << (data ? fixed2(summary.base_accuracy) : "") << '\n';
  for (double rate : cfg.rates) {
    PruneOutput out;
    out.rate = rate;
    out.plan = make_pruning_plan(model, rate, layers, cfg.rounding);
    const Model pruned = apply_plan(model, out.plan);
    out.cost = cost_model(pruned);
    out.ratios = speedup_compression(summary.base, out.cost);
    if (data) out.accuracy = evaluate_accuracy(pruned, data->test);
    const std::string tag = rate_tag(rate);
    out.checkpoint = cfg.out_dir / ("pruned_p" + tag + ".gprn");
    save_checkpoint(pruned, out.checkpoint);
    write_plan_file(cfg.out_dir / ("plan_p" + tag + ".json"), out.plan);
    OutputFile cost(cfg.out_dir / ("cost_p" + tag + ".csv"));
    write_cost_csv(cost.stream(), out.cost);
    cost.flush();
    table.stream() << fmt(rate) << ',' << out.cost.total_params << ',' << out.cost.total_flops << ','
                   << fmt(out.ratios.speedup, 4) << ',' << fmt(out.ratios.compression, 4) << ','
                   << (data ? fixed2(out.accuracy) : "") << '\n';
    table.flush();
    if (progress)
      *progress << "p_r " << fmt(rate) << ": speedup " << fmt(out.ratios.speedup, 3) << "x compression "
                << fmt(out.ratios.compression, 3) << "x\n";
    summary.outputs.push_back(std::move(out));
  }
  summary.optimizer_steps = optimizer_step_counter().load() - steps_before;
  if (summary.optimizer_steps != 0) throw ContractError("optimizer steps executed while pruning");

  Json meta = run_metadata(cfg, "prune");
  meta["input_checkpoint"] = checkpoint.filename().string();
  meta["rounding"] = std::string(rounding_name(cfg.rounding));
  meta["prune_layers"] = layers;
  meta["optimizer_steps"] = summary.optimizer_steps;
  write_json(cfg.out_dir / "run_prune.json", meta);
  return summary;
}

// ---------------------------------------------------------------- finetune

struct FinetuneSummary {
  std::filesystem::path checkpoint;
  double accuracy_before = 0.0;
  double accuracy_after = 0.0;
  std::vector<EpochLog> epochs;
};

// Plain SGD on a pruned model; gravity is off whatever the config says.
inline FinetuneSummary finetune_model(Model& model, const DatasetSplit& data, const TrainOptions& opt,
                                      const EpochCallback& on_epoch = {}) {
  FinetuneSummary s;
  s.accuracy_before = evaluate_accuracy(model, data.test);
  s.accuracy_after = s.accuracy_before;
  if (opt.epochs == 0) return s;
  const auto r = train_with_gravity(model, data.train, GravityConfig{}, opt, &data.test, on_epoch);
  s.epochs = r.epochs;
  s.accuracy_after = r.epochs.back().test_accuracy;
  return s;
}

inline FinetuneSummary cmd_finetune(const RunConfig& cfg, const std::filesystem::path& checkpoint,
                                    std::ostream* progress = nullptr) {
  check_paths(cfg);
  Model model = load_checkpoint(checkpoint);
  const DatasetSplit data = load_dataset(cfg);
  std::filesystem::create_directories(cfg.out_dir);
  const std::string stem = checkpoint.stem().string();
  OutputFile log(cfg.out_dir / (stem + "_finetune_log.csv"));
  log.stream() << "epoch,loss,train_accuracy,test_accuracy,seconds\n";
  auto s = finetune_model(model, data, cfg.finetune_options(), [&](const EpochLog& e) {
    log.stream() << e.epoch << ',' << fmt(e.loss, 9) << ',' << fixed2(e.train_accuracy) << ','
                 << fixed2(e.test_accuracy) << ',' << fmt(e.seconds, 4) << '\n';
    log.flush();
    if (progress) *progress << "finetune epoch " << e.epoch << " test " << fixed2(e.test_accuracy) << "%\n";
  });
  s.checkpoint = cfg.out_dir / (stem + "_ft.gprn");
  save_checkpoint(model, s.checkpoint, {cfg.finetune_options().epochs, cfg.seed, 0});
  Json meta = run_metadata(cfg, "finetune");
  meta["input_checkpoint"] = checkpoint.filename().string();
  meta["epochs"] = cfg.finetune_options().epochs;
  meta["accuracy_before"] = s.accuracy_before;
  meta["accuracy_after"] = s.accuracy_after;
  write_json(cfg.out_dir / (stem + "_finetune.json"), meta);
  return s;
}

// ---------------------------------------------------------------- sweep

struct SweepCell {
  double alpha_g = 0.0;
  std::uint64_t seed = 0;
  double rate = 0.0;
  double accuracy = 0.0;
  double finetuned_accuracy = std::nan("");
  double speedup = 1.0;
  double compression = 1.0;
  double train_seconds = 0.0;
  double prune_seconds = 0.0;
};

struct SweepMass {
  double alpha_g = 0.0;
  std::uint64_t seed = 0;
  std::string layer;
  std::size_t attractor = 0;
  double spearman = 0.0;
  std::vector<double> masses;
};

struct SweepResult {
  std::vector<SweepCell> cells;
  std::vector<SweepMass> masses;

  // Median accuracy over seeds for one (alpha, rate) cell.
  double median_accuracy(double alpha, double rate) const {
    std::vector<double> v;
    for (const auto& c : cells)
      if (c.alpha_g == alpha && c.rate == rate) v.push_back(c.accuracy);
    return median(v);
  }
  double median_spearman(double alpha) const {
    std::vector<double> v;
    for (const auto& m : masses)
      if (m.alpha_g == alpha && std::isfinite(m.spearman)) v.push_back(m.spearman);
    return median(v);
  }
};

inline void write_sweep_curves(const std::filesystem::path& dir, const RunConfig& cfg, const SweepResult& r) {
  for (double alpha : cfg.sweep.alpha_g) {
    OutputFile dat(dir / ("sweep_alpha_" + fmt(alpha) + ".dat"));
    dat.stream() << "# alpha_g " << fmt(alpha) << ", median over seeds\n# rate accuracy speedup compression\n";
    for (double rate : cfg.sweep.rates) {
      double sp = std::nan(""), cp = std::nan("");
      for (const auto& c : r.cells)
        if (c.alpha_g == alpha && c.rate == rate) {
          sp = c.speedup;
          cp = c.compression;
        }
      const double acc = r.median_accuracy(alpha, rate);
      if (std::isnan(acc)) continue;
      dat.stream() << fmt(rate) << ' ' << fixed2(acc) << ' ' << fmt(sp, 4) << ' ' << fmt(cp, 4) << '\n';
    }
    dat.flush();
  }
}

// Gravity-rate x pruning-rate grid. For each seed every alpha starts from
// the same initialization; each trained model is pruned at every rate
// without retraining. Rows are flushed as they complete, and the curve
// files are written even when a run aborts part way.
inline SweepResult cmd_sweep(const RunConfig& cfg, std::ostream* progress = nullptr) {
  check_paths(cfg);
  const DatasetSplit data = load_dataset(cfg);
  std::filesystem::create_directories(cfg.out_dir);
  SweepResult result;
  OutputFile csv(cfg.out_dir / "sweep.csv"), mass(cfg.out_dir / "sweep_mass.csv");
  csv.stream() << "alpha_g,seed,rate,accuracy,finetuned_accuracy,speedup,compression,train_seconds,prune_seconds\n";
  mass.stream() << "alpha_g,seed,layer_id,attractor,spearman_mass_distance\n";
  try {
    for (std::uint64_t seed : cfg.sweep.seeds)
      for (double alpha : cfg.sweep.alpha_g) {
        Model model = initial_model(cfg, seed);
        const GravityConfig gravity = gravity_for(cfg, model, alpha);
        const auto t0 = std::chrono::steady_clock::now();
        train_with_gravity(model, data.train, gravity, cfg.train_options(seed));
        const double train_seconds = std::chrono::duration<double>(std::chrono::steady_clock::now() - t0).count();
        for (const auto& l : gravity_snapshot(model, gravity)) {
          SweepMass m{alpha, seed, l.layer, l.state.attractor, mass_distance_correlation(l.state), l.state.masses};
          mass.stream() << fmt(alpha) << ',' << seed << ',' << m.layer << ',' << m.attractor << ','
                        << fmt(m.spearman, 4) << '\n';
          result.masses.push_back(std::move(m));
        }
        mass.flush();
        const CostReport base = cost_model(model);
        for (double rate : cfg.sweep.rates) {
          const auto p0 = std::chrono::steady_clock::now();
          Model pruned = apply_plan(model, make_pruning_plan(model, rate, gravity.prune_layers, cfg.rounding));
          SweepCell cell;
          cell.alpha_g = alpha;
          cell.seed = seed;
          cell.rate = rate;
          cell.accuracy = evaluate_accuracy(pruned, data.test);
          const Ratios r = speedup_compression(base, cost_model(pruned));
          cell.speedup = r.speedup;
          cell.compression = r.compression;
          cell.train_seconds = train_seconds;
          cell.prune_seconds = std::chrono::duration<double>(std::chrono::steady_clock::now() - p0).count();
          if (cfg.sweep.finetune) {
            TrainOptions opt = cfg.finetune_options();
            opt.seed = seed;
            cell.finetuned_accuracy = finetune_model(pruned, data, opt).accuracy_after;
          }
          csv.stream() << fmt(alpha) << ',' << seed << ',' << fmt(rate) << ',' << fixed2(cell.accuracy) << ','
                       << (std::isnan(cell.finetuned_accuracy) ? "" : fixed2(cell.finetuned_accuracy)) << ','
                       << fmt(cell.speedup, 4) << ',' << fmt(cell.compression, 4) << ','
                       << fmt(cell.train_seconds, 4) << ',' << fmt(cell.prune_seconds, 4) << '\n';
          csv.flush();
          result.cells.push_back(cell);
        }
        if (progress)
          *progress << "alpha_g " << fmt(alpha) << " seed " << seed << ": accuracy "
                    << fixed2(result.cells[result.cells.size() - cfg.sweep.rates.size()].accuracy) << "% -> "
                    << fixed2(result.cells.back().accuracy) << "% at p_r " << fmt(cfg.sweep.rates.back()) << " ("
                    << fmt(train_seconds, 3) << " s)\n";
      }
  } catch (...) {
    write_sweep_curves(cfg.out_dir, cfg, result);
    throw;
  }
  write_sweep_curves(cfg.out_dir, cfg, result);
  Json meta = run_metadata(cfg, "sweep");
  meta["cells"] = result.cells.size();
  write_json(cfg.out_dir / "run_sweep.json", meta);
  return result;
}

// ---------------------------------------------------------------- analyze

struct LayerAnalysis {
  std::string layer;
  std::size_t filters = 0;
  std::size_t attractor = 0;
  double spearman = 0.0;
  std::vector<double> masses;
};

struct AnalyzeReport {
  std::vector<LayerAnalysis> layers;
  CostReport cost;
};

inline constexpr std::size_t kHistogramBins = 10;

// Mass histogram per conv layer (mass_histogram.csv), attractor and the
// mass-vs-distance rank correlation per conv layer (attractors.csv), and
// the cost report (cost.csv).
inline AnalyzeReport cmd_analyze(const RunConfig& cfg, const std::filesystem::path& checkpoint) {
  const Model model = load_checkpoint(checkpoint);
  AnalyzeReport report;
  report.cost = cost_model(model);
  std::filesystem::create_directories(cfg.out_dir);
  OutputFile hist(cfg.out_dir / "mass_histogram.csv"), att(cfg.out_dir / "attractors.csv"),
      cost(cfg.out_dir / "cost.csv");
  hist.stream() << "layer_id,bin_low,bin_high,count\n";
  att.stream() << "layer_id,filters,attractor,attractor_mass,spearman_mass_distance\n";
  for (std::size_t i = 0; i < model.num_layers(); ++i) {
    if (model.arch.layers[i].kind != LayerKind::conv2d) continue;
    const auto st = layer_penalty(model.param(i, "weight"), cfg.gravity);
    LayerAnalysis a{model.arch.layers[i].name, st.masses.size(), st.attractor, mass_distance_correlation(st),
                    st.masses};
    const double hi = *std::max_element(st.masses.begin(), st.masses.end());
    const double width = hi > 0 ? hi / kHistogramBins : 1.0;
    std::vector<std::size_t> counts(kHistogramBins, 0);
    for (double m : st.masses) ++counts[std::min(kHistogramBins - 1, static_cast<std::size_t>(m / width))];
    for (std::size_t b = 0; b < kHistogramBins; ++b)
      hist.stream() << a.layer << ',' << fmt(width * b, 6) << ',' << fmt(width * (b + 1), 6) << ',' << counts[b]
                    << '\n';
    att.stream() << a.layer << ',' << a.filters << ',' << a.attractor << ',' << fmt(st.masses[st.attractor], 6) << ','
                 << (std::isnan(a.spearman) ? std::string("") : fmt(a.spearman, 4)) << '\n';
    report.layers.push_back(std::move(a));
  }
  write_cost_csv(cost.stream(), report.cost);
  hist.flush();
  att.flush();
  cost.flush();
  return report;
}

}  // namespace gravprune
