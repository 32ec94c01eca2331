#pragma once

#include <chrono>
#include <cmath>
#include <functional>
#include <numeric>
#include <optional>
#include <string>
#include <vector>

#include "gravprune/dataset.hpp"
#include "gravprune/engine.hpp"
#include "gravprune/gravity.hpp"
#include "gravprune/model.hpp"
#include "gravprune/rng.hpp"

namespace gravprune {

// Step-decay learning rate: base * gamma^(number of milestones <= epoch).
struct LrSchedule {
  double base = 0.05;
  std::vector<std::size_t> milestones;
  double gamma = 0.1;

  double at(std::size_t epoch) const {
    double lr = base;
    for (auto m : milestones)
      if (epoch >= m) lr *= gamma;
    return lr;
  }
};

struct TrainOptions {
  std::size_t epochs = 1;
  std::size_t batch_size = 64;
  LrSchedule lr;
  std::uint64_t seed = 1;
  bool flip = false;
};

struct LayerForceLog {
  std::string layer;
  LayerGravityState state;
};

struct EpochLog {
  std::size_t epoch = 0;
  double loss = 0.0;
  double train_accuracy = 0.0;
  double test_accuracy = std::nan("");
  double seconds = 0.0;
  std::vector<LayerForceLog> layers;
};

struct TrainResult {
  std::vector<EpochLog> epochs;
  std::uint64_t steps = 0;
};

// Top-1 accuracy in percent, eval-mode forward.
inline double evaluate_accuracy(const Model& model, const Dataset& data, std::size_t batch_size = 256) {
  if (data.size() == 0) return 0.0;
  std::size_t correct = 0;
  std::vector<std::size_t> idx;
  for (std::size_t b0 = 0; b0 < data.size(); b0 += batch_size) {
    idx.resize(std::min(batch_size, data.size() - b0));
    std::iota(idx.begin(), idx.end(), b0);
    const Tensor logits = forward(model, data.batch(idx));
    const std::size_t K = logits.dim(1);
    for (std::size_t b = 0; b < idx.size(); ++b) {
      const float* z = logits.ptr() + b * K;
      if (static_cast<int>(std::max_element(z, z + K) - z) == data.labels[idx[b]]) ++correct;
    }
  }
  return 100.0 * static_cast<double>(correct) / static_cast<double>(data.size());
}

inline std::vector<LayerForceLog> gravity_snapshot(const Model& model, const GravityConfig& cfg,
                                                   const AttractorMap* attractors = nullptr) {
  std::vector<LayerForceLog> out;
  for (const auto& name : cfg.prune_layers) {
    const auto i = static_cast<std::size_t>(model.require_index(name));
    std::optional<std::size_t> fixed;
    if (attractors && i < attractors->size()) fixed = (*attractors)[i];
    out.push_back({name, layer_penalty(model.param(i, "weight"), cfg, fixed)});
  }
  return out;
}

using EpochCallback = std::function<void(const EpochLog&)>;

// Gravity-based training: every step recomputes masses, attractor,
// distances and forces for the penalized layers, then applies the
// regularized update. alpha_g = 0 is plain SGD.
inline TrainResult train_with_gravity(Model& model, const Dataset& train, const GravityConfig& cfg,
                                      const TrainOptions& opt, const Dataset* test = nullptr,
                                      const EpochCallback& on_epoch = {}) {
  if (opt.epochs < 1) throw ContractError("training needs at least one epoch");
  if (train.size() == 0) throw ContractError("training set is empty");
  if (opt.batch_size == 0) throw ContractError("batch size must be positive");
  validate_gravity_config(cfg, model);

  TrainResult result;
  std::vector<std::size_t> order(train.size());
  std::iota(order.begin(), order.end(), 0);
  for (std::size_t epoch = 0; epoch < opt.epochs; ++epoch) {
    const auto t0 = std::chrono::steady_clock::now();
    Rng rng(mix_seed(opt.seed, 1000 + epoch));
    rng.shuffle(std::span<std::size_t>(order));
    const double lr = opt.lr.at(epoch);

    AttractorMap frozen;
    const AttractorMap* attractors = nullptr;
    if (!cfg.recompute_attractor) {
      frozen.assign(model.num_layers(), std::nullopt);
      for (const auto& name : cfg.prune_layers) {
        const auto i = static_cast<std::size_t>(model.require_index(name));
        frozen[i] = select_attractor(filter_masses(model.param(i, "weight")), cfg.attractor_mode);
      }
      attractors = &frozen;
    }

    double loss_sum = 0.0;
    std::size_t correct = 0, seen = 0;
    for (std::size_t b0 = 0; b0 < order.size(); b0 += opt.batch_size) {
      std::span<const std::size_t> idx(order.data() + b0, std::min(opt.batch_size, order.size() - b0));
      const Tensor batch = train.batch(idx, opt.flip, &rng);
      const auto labels = train.batch_labels(idx);
      const StepResult step = regularized_step(model, batch, labels, cfg, lr, attractors);
      if (!std::isfinite(step.loss)) throw NumericError("training diverged: non-finite loss");
      loss_sum += step.loss * static_cast<double>(idx.size());
      correct += step.correct;
      seen += idx.size();
      ++result.steps;
    }

    EpochLog log;
    log.epoch = epoch + 1;
    log.loss = loss_sum / static_cast<double>(seen);
    log.train_accuracy = 100.0 * static_cast<double>(correct) / static_cast<double>(seen);
    if (test) log.test_accuracy = evaluate_accuracy(model, *test);
    log.layers = gravity_snapshot(model, cfg, attractors);
    log.seconds = std::chrono::duration<double>(std::chrono::steady_clock::now() - t0).count();
    if (!std::isfinite(log.loss)) throw NumericError("training diverged: non-finite loss");
    if (on_epoch) on_epoch(log);
    result.epochs.push_back(std::move(log));
  }
  return result;
}

}  // namespace gravprune
