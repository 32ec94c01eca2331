// gravprune: train / prune / finetune / sweep / analyze from a JSON config.
//
// exit codes: 0 ok, 2 config error, 3 numeric divergence, 4 I/O or file format error

#include <CLI11.hpp>

#include <iostream>

#include "gravprune/gravprune.hpp"

namespace gp = gravprune;

namespace {

struct Args {
  std::string config;
  std::string checkpoint;
  gp::Overrides over;
  bool quiet = false;
};

void add_common(CLI::App* cmd, Args& a, bool needs_checkpoint) {
  cmd->add_option("--config", a.config, "run config (JSON)")->required();
  if (needs_checkpoint) cmd->add_option("--checkpoint", a.checkpoint, "input checkpoint")->required();
  cmd->add_option("--alpha-g", a.over.alpha_g, "gravity rate override");
  cmd->add_option("--prune-rate", a.over.prune_rate, "single pruning rate in [0,1)");
  cmd->add_option("--seed", a.over.seed, "seed override");
  cmd->add_option("--out-dir", a.over.out_dir, "output directory override");
  cmd->add_flag("-q,--quiet", a.quiet, "no progress output");
}

gp::RunConfig config_for(const Args& a) {
  gp::RunConfig cfg = gp::load_run_config(a.config);
  gp::apply_overrides(cfg, a.over);
  return cfg;
}

int run(CLI::App& app, Args& a) {
  std::ostream* progress = a.quiet ? nullptr : &std::cerr;
  if (app.got_subcommand("train")) {
    const auto s = gp::cmd_train(config_for(a), progress);
    std::cout << "checkpoint " << s.checkpoint.string() << "\n"
              << "test accuracy " << gp::fixed2(s.epochs.back().test_accuracy) << "%\n";
  } else if (app.got_subcommand("prune")) {
    const auto s = gp::cmd_prune(config_for(a), a.checkpoint, true, progress);
    std::cout << "rate,params,flops,speedup,compression,accuracy\n";
    for (const auto& o : s.outputs)
      std::cout << gp::fmt(o.rate) << ',' << o.cost.total_params << ',' << o.cost.total_flops << ','
                << gp::fmt(o.ratios.speedup, 4) << ',' << gp::fmt(o.ratios.compression, 4) << ','
                << gp::fixed2(o.accuracy) << '\n';
  } else if (app.got_subcommand("finetune")) {
    const auto s = gp::cmd_finetune(config_for(a), a.checkpoint, progress);
    std::cout << "checkpoint " << s.checkpoint.string() << "\n"
              << "accuracy " << gp::fixed2(s.accuracy_before) << "% -> " << gp::fixed2(s.accuracy_after) << "%\n";
  } else if (app.got_subcommand("sweep")) {
    const auto cfg = config_for(a);
    const auto r = gp::cmd_sweep(cfg, progress);
    std::cout << "alpha_g";
    for (double p : cfg.sweep.rates) std::cout << ",p" << gp::rate_tag(p);
    std::cout << ",spearman\n";
    for (double alpha : cfg.sweep.alpha_g) {
      std::cout << gp::fmt(alpha);
      for (double p : cfg.sweep.rates) std::cout << ',' << gp::fixed2(r.median_accuracy(alpha, p));
      std::cout << ',' << gp::fmt(r.median_spearman(alpha), 3) << '\n';
    }
  } else if (app.got_subcommand("analyze")) {
    const auto r = gp::cmd_analyze(config_for(a), a.checkpoint);
    std::cout << "layer_id,filters,attractor,spearman_mass_distance\n";
    for (const auto& l : r.layers)
      std::cout << l.layer << ',' << l.filters << ',' << l.attractor << ',' << gp::fmt(l.spearman, 4) << '\n';
    std::cout << "params " << r.cost.total_params << ", flops " << r.cost.total_flops << '\n';
  }
  return 0;
}

}  // namespace

int main(int argc, char** argv) {
  CLI::App app{"gravity-regularized training and L1 filter pruning"};
  app.require_subcommand(1);
  Args a;
  add_common(app.add_subcommand("train", "train with the gravity regularizer"), a, false);
  add_common(app.add_subcommand("prune", "prune one checkpoint at every configured rate"), a, true);
  add_common(app.add_subcommand("finetune", "plain SGD on a pruned checkpoint"), a, true);
  add_common(app.add_subcommand("sweep", "gravity rate x pruning rate grid"), a, false);
  add_common(app.add_subcommand("analyze", "filter masses, attractors and cost of a checkpoint"), a, true);
  try {
    app.parse(argc, argv);
  } catch (const CLI::ParseError& e) {
    const int code = app.exit(e);
    return code == 0 ? 0 : 2;
  }
  try {
    return run(app, a);
  } catch (const gp::NumericError& e) {
    std::cerr << "error: " << e.what() << '\n';
    return 3;
  } catch (const gp::IoError& e) {
    std::cerr << "error: " << e.what() << '\n';
    return 4;
  } catch (const gp::FormatError& e) {
    std::cerr << "error: " << e.what() << '\n';
    return 4;
  } catch (const std::filesystem::filesystem_error& e) {
    std::cerr << "error: " << e.what() << '\n';
    return 4;
  } catch (const gp::Error& e) {
    // config, parse, shape and contract errors all mean the inputs were wrong
    std::cerr << "error: " << e.what() << '\n';
    return 2;
  }
}
