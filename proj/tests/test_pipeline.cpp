#include <gtest/gtest.h>

#include "test_util.hpp"

using namespace gravprune;
using namespace gravprune::testing;

namespace {

std::filesystem::path temp_dir(const std::string& name) {
  auto p = std::filesystem::temp_directory_path() / ("gravprune_test_pipeline_" + name);
  std::filesystem::remove_all(p);
  std::filesystem::create_directories(p);
  return p;
}

// Small synthetic run: a few seconds per training.
RunConfig small_config(const std::string& name, double alpha_g = 1e4, std::size_t epochs = 3) {
  Json doc = {{"dataset", {{"train_samples", 400}, {"test_samples", 200}, {"seed", 3}}},
              {"model", "toy4.arch"},
              {"seed", 5},
              {"epochs", epochs},
              {"batch_size", 32},
              {"lr", 0.05},
              {"gravity", {{"alpha_g", alpha_g}}},
              {"pruning", {{"rates", {0.0, 0.3, 0.5}}}},
              {"sweep", {{"alpha_g", {0.0, 1e4}}, {"rates", {0.0, 0.2, 0.4}}, {"seeds", {1, 2}}}},
              {"finetune", {{"epochs", 2}}}};
  RunConfig c = parse_run_config(doc, GRAVPRUNE_CONFIG_DIR);
  c.out_dir = temp_dir(name);
  return c;
}

std::vector<std::string> lines_of(const std::filesystem::path& p) {
  std::ifstream is(p);
  std::vector<std::string> out;
  for (std::string line; std::getline(is, line);) out.push_back(line);
  return out;
}

std::string without_column(const std::string& line, std::size_t col) {
  std::stringstream ss(line);
  std::string cell, out;
  for (std::size_t i = 0; std::getline(ss, cell, ','); ++i)
    if (i != col) out += cell + ",";
  return out;
}

}  // namespace

TEST(Train, AlphaZeroMatchesBaselineTraining) {
  RunConfig cfg = small_config("alpha0", 0.0, 2);
  const auto s = cmd_train(cfg);
  // Baseline: plain training, no penalized layers at all.
  const DatasetSplit data = load_dataset(cfg);
  Model baseline = initial_model(cfg, cfg.seed);
  train_with_gravity(baseline, data.train, GravityConfig{}, cfg.train_options(cfg.seed));
  EXPECT_EQ(load_checkpoint(s.checkpoint), baseline);
}

TEST(Train, EmitsOneLogRowPerEpoch) {
  RunConfig cfg = small_config("logs", 1e4, 3);
  const auto s = cmd_train(cfg);
  const auto log = lines_of(cfg.out_dir / "train_log.csv");
  ASSERT_EQ(log.size(), 4u);
  EXPECT_EQ(log[0], "epoch,loss,train_accuracy,test_accuracy,seconds,force_conv2,force_conv3,force_conv4");
  EXPECT_EQ(log[3].substr(0, 2), "3,");
  for (const auto& e : s.epochs) {
    EXPECT_GT(e.seconds, 0.0);
    EXPECT_GE(e.test_accuracy, 0.0);
    EXPECT_LE(e.test_accuracy, 100.0);
  }
  const auto forces = lines_of(cfg.out_dir / "forces.csv");
  EXPECT_EQ(forces[0], "epoch,layer_id,filter_index,mass,distance,force");
  EXPECT_EQ(forces.size(), 1u + 3 * (32 + 32 + 64));
  // Each layer's attractor row has infinite distance and zero force.
  std::size_t attractors = 0;
  for (const auto& l : forces)
    if (l.find(",inf,") != std::string::npos) {
      ++attractors;
      EXPECT_EQ(l.substr(l.size() - 2), ",0");
    }
  EXPECT_EQ(attractors, 9u);
  std::ifstream meta(cfg.out_dir / "run_train.json");
  const Json j = Json::parse(meta);
  EXPECT_EQ(j["config_hash"], config_hash(cfg));
  EXPECT_EQ(j["version"], kVersion);
  EXPECT_EQ(j["prune_layers"].size(), 3u);
}

TEST(Train, DivergenceIsANumericError) {
  RunConfig cfg = small_config("diverge", 0.0, 2);
  cfg.lr.base = 1e6;
  EXPECT_THROW(cmd_train(cfg), NumericError);
}

TEST(Train, IsDeterministicApartFromTimings) {
  RunConfig a = small_config("det_a", 1e4, 2), b = small_config("det_b", 1e4, 2);
  cmd_train(a);
  cmd_train(b);
  EXPECT_EQ(read_file(a.out_dir / "model.gprn"), read_file(b.out_dir / "model.gprn"));
  EXPECT_EQ(read_file(a.out_dir / "forces.csv"), read_file(b.out_dir / "forces.csv"));
  const auto la = lines_of(a.out_dir / "train_log.csv"), lb = lines_of(b.out_dir / "train_log.csv");
  ASSERT_EQ(la.size(), lb.size());
  for (std::size_t i = 0; i < la.size(); ++i) EXPECT_EQ(without_column(la[i], 4), without_column(lb[i], 4));
}

class PrunePipeline : public ::testing::Test {
protected:
  static void SetUpTestSuite() {
    RunConfig cfg = small_config("prune_src", 1e4, 3);
    checkpoint_ = new std::filesystem::path(cmd_train(cfg).checkpoint);
  }
  static void TearDownTestSuite() { delete checkpoint_; }
  static std::filesystem::path* checkpoint_;
};
std::filesystem::path* PrunePipeline::checkpoint_ = nullptr;

TEST_F(PrunePipeline, RateZeroIsForwardEquivalent) {
  RunConfig cfg = small_config("prune_zero");
  const auto s = cmd_prune(cfg, *checkpoint_);
  ASSERT_EQ(s.outputs.size(), 3u);
  const Model in = load_checkpoint(*checkpoint_);
  const Model out = load_checkpoint(s.outputs[0].checkpoint);
  Rng rng(1);
  const Tensor x = random_batch(in, 16, rng);
  EXPECT_EQ(forward(in, x), forward(out, x));
  EXPECT_EQ(s.outputs[0].cost.total_params, s.base.total_params);
  EXPECT_EQ(s.outputs[0].accuracy, s.base_accuracy);
}

TEST_F(PrunePipeline, AllRatesDeriveFromOneFrozenCheckpoint) {
  RunConfig cfg = small_config("prune_frozen");
  const auto before = read_file(*checkpoint_);
  const auto steps = optimizer_step_counter().load();
  const auto s = cmd_prune(cfg, *checkpoint_);
  EXPECT_EQ(optimizer_step_counter().load(), steps);
  EXPECT_EQ(s.optimizer_steps, 0u);
  EXPECT_EQ(read_file(*checkpoint_), before);
  const Model in = load_checkpoint(*checkpoint_);
  for (const auto& o : s.outputs) {
    // Plan scores are the input model's masses at every rate.
    for (const auto& lp : o.plan.layers)
      EXPECT_EQ(lp.scores, filter_masses(in.param(in.require_index(lp.layer), "weight")));
    EXPECT_EQ(read_plan_file(cfg.out_dir / ("plan_p" + rate_tag(o.rate) + ".json")), o.plan);
    std::ostringstream cost;
    write_cost_csv(cost, o.cost);
    std::ifstream is(cfg.out_dir / ("cost_p" + rate_tag(o.rate) + ".csv"));
    std::stringstream file;
    file << is.rdbuf();
    EXPECT_EQ(file.str(), cost.str());
  }
  const auto table = lines_of(cfg.out_dir / "prune_summary.csv");
  EXPECT_EQ(table[0], "rate,params,flops,speedup,compression,accuracy");
  EXPECT_EQ(table.size(), 5u);  // header, unpruned, three rates
}

TEST_F(PrunePipeline, SameInputSameOutputs) {
  RunConfig a = small_config("prune_a"), b = small_config("prune_b");
  cmd_prune(a, *checkpoint_);
  cmd_prune(b, *checkpoint_);
  for (const char* f : {"pruned_p30.gprn", "pruned_p50.gprn", "plan_p30.json", "plan_p50.json", "cost_p50.csv",
                        "prune_summary.csv"})
    EXPECT_EQ(read_file(a.out_dir / f), read_file(b.out_dir / f)) << f;
}

TEST_F(PrunePipeline, AnalyzeAgreesWithPrune) {
  RunConfig cfg = small_config("analyze");
  const auto s = cmd_prune(cfg, *checkpoint_, false);
  const auto& half = s.outputs.back();
  const AnalyzeReport r = cmd_analyze(cfg, half.checkpoint);
  EXPECT_EQ(r.cost.total_params, half.cost.total_params);
  EXPECT_EQ(r.cost.total_flops, half.cost.total_flops);
  ASSERT_EQ(r.layers.size(), 4u);
  EXPECT_EQ(r.layers[3].filters, 32u);
  const auto hist = lines_of(cfg.out_dir / "mass_histogram.csv");
  EXPECT_EQ(hist.size(), 1 + 4 * kHistogramBins);
  EXPECT_EQ(lines_of(cfg.out_dir / "attractors.csv").size(), 5u);
}

TEST(Plan, FileFormat) {
  const Model m = load_arch("toy4.arch", 3);
  const PruningPlan plan = make_pruning_plan(m, 0.25, default_prune_scope(m), Rounding::floor_kept);
  Json j = plan_to_json(plan);
  EXPECT_EQ(j["version"], kPlanFormatVersion);
  EXPECT_EQ(j["layers"][0]["kept"].size(), 24u);
  EXPECT_EQ(plan_from_json(j), plan);
  j["version"] = 2;
  EXPECT_THROW(plan_from_json(j), VersionError);
  j["version"] = 1;
  j["layers"][0]["kept"].push_back(99);
  EXPECT_THROW(plan_from_json(j), FormatError);
  EXPECT_THROW(plan_from_json(Json::parse(R"({"format": "gravprune-plan"})")), FormatError);
}

TEST(Analyze, FreshModelMassesArePositiveAndEven) {
  RunConfig cfg = small_config("analyze_fresh");
  const Model m = initial_model(cfg, 1);
  save_checkpoint(m, cfg.out_dir / "fresh.gprn");
  const AnalyzeReport r = cmd_analyze(cfg, cfg.out_dir / "fresh.gprn");
  for (const auto& l : r.layers) {
    const auto [lo, hi] = std::minmax_element(l.masses.begin(), l.masses.end());
    EXPECT_GT(*lo, 0.0) << l.layer;
    EXPECT_LT(*hi / *lo, 3.0) << l.layer;
  }
}

TEST(Analyze, GravityTrainedMassFallsWithDistance) {
  RunConfig cfg = small_config("analyze_gravity", 1e4, 6);
  cfg.lr.base = 0.1;
  const auto s = cmd_train(cfg);
  const AnalyzeReport r = cmd_analyze(cfg, s.checkpoint);
  for (const auto& l : r.layers) {
    if (l.layer == "conv1") continue;
    // Oracle correlation from the reported masses.
    std::vector<double> gap, mass;
    for (std::size_t n = 0; n < l.masses.size(); ++n)
      if (n != l.attractor) {
        gap.push_back(std::abs(static_cast<double>(n) - static_cast<double>(l.attractor)));
        mass.push_back(l.masses[n]);
      }
    const double rho = spearman(gap, mass);
    EXPECT_NEAR(l.spearman, rho, 1e-12) << l.layer;
    EXPECT_LT(rho, -0.3) << l.layer;
  }
}

TEST(Finetune, ZeroEpochsKeepsAccuracy) {
  RunConfig cfg = small_config("ft_zero");
  cfg.finetune_epochs = 0;
  const Model m = initial_model(cfg, 2);
  save_checkpoint(m, cfg.out_dir / "m.gprn");
  const auto s = cmd_finetune(cfg, cfg.out_dir / "m.gprn");
  EXPECT_EQ(s.accuracy_after, s.accuracy_before);
  EXPECT_EQ(s.accuracy_before, evaluate_accuracy(m, load_dataset(cfg).test));
  EXPECT_EQ(load_checkpoint(s.checkpoint), m);
}

TEST(Finetune, GravityIsOff) {
  RunConfig cfg = small_config("ft_nograv", 1e5);
  Model m = initial_model(cfg, 2);
  save_checkpoint(m, cfg.out_dir / "m.gprn");
  const auto s = cmd_finetune(cfg, cfg.out_dir / "m.gprn");
  const DatasetSplit data = load_dataset(cfg);
  train_with_gravity(m, data.train, GravityConfig{}, cfg.finetune_options());
  EXPECT_EQ(load_checkpoint(s.checkpoint), m);
  EXPECT_EQ(lines_of(cfg.out_dir / "m_finetune_log.csv").size(), 3u);
}

TEST(Finetune, RecoversPrunedAccuracy) {
  std::vector<double> gain;
  for (std::uint64_t seed : {1, 2, 3}) {
    RunConfig cfg = small_config("ft_gain_" + std::to_string(seed), 0.0, 4);
    cfg.seed = seed;
    cfg.rates = {0.3};
    const auto trained = cmd_train(cfg);
    const auto pruned = cmd_prune(cfg, trained.checkpoint, false);
    const auto s = cmd_finetune(cfg, pruned.outputs[0].checkpoint);
    gain.push_back(s.accuracy_after - s.accuracy_before);
  }
  EXPECT_GE(median(gain), 0.0) << gain[0] << ' ' << gain[1] << ' ' << gain[2];
}

TEST(Sweep, CoversTheGrid) {
  RunConfig cfg = small_config("sweep", 0.0, 1);
  const SweepResult r = cmd_sweep(cfg);
  EXPECT_EQ(r.cells.size(), 2u * 2 * 3);
  EXPECT_EQ(lines_of(cfg.out_dir / "sweep.csv").size(), 1u + 12);
  for (double alpha : cfg.sweep.alpha_g) {
    const auto dat = lines_of(cfg.out_dir / ("sweep_alpha_" + fmt(alpha) + ".dat"));
    EXPECT_EQ(dat.size(), 2u + 3) << alpha;
  }
  for (const auto& c : r.cells) {
    EXPECT_GE(c.accuracy, 0.0);
    EXPECT_LE(c.accuracy, 100.0);
    EXPECT_TRUE(std::isnan(c.finetuned_accuracy));
  }
  // p_r = 0 cells equal the unpruned model's accuracy, retrained here.
  const DatasetSplit data = load_dataset(cfg);
  for (const auto& c : r.cells) {
    if (c.rate != 0.0) continue;
    Model m = initial_model(cfg, c.seed);
    train_with_gravity(m, data.train, gravity_for(cfg, m, c.alpha_g), cfg.train_options(c.seed));
    EXPECT_EQ(c.accuracy, evaluate_accuracy(m, data.test)) << c.alpha_g << ' ' << c.seed;
    EXPECT_EQ(c.speedup, 1.0);
  }
}

TEST(Sweep, FlushesRowsBeforeAFailure) {
  RunConfig cfg = small_config("sweep_abort", 0.0, 1);
  cfg.sweep.alpha_g = {0.0, 1e30};  // the second curve diverges
  EXPECT_THROW(cmd_sweep(cfg), NumericError);
  EXPECT_EQ(lines_of(cfg.out_dir / "sweep.csv").size(), 1u + 3);
  EXPECT_EQ(lines_of(cfg.out_dir / "sweep_alpha_0.dat").size(), 2u + 3);
}

TEST(Spearman, LibraryMatchesOracle) {
  Rng rng(8);
  for (int t = 0; t < 20; ++t) {
    std::vector<double> x(12), y(12);
    for (auto& v : x) v = static_cast<double>(rng.below(5));
    for (auto& v : y) v = rng.uniform();
    EXPECT_NEAR(spearman_rank(x, y), spearman(x, y), 1e-12);
  }
  EXPECT_DOUBLE_EQ(spearman_rank({1, 2, 3}, {3, 2, 1}), -1.0);
}
