#pragma once

#include <algorithm>
#include <cmath>
#include <numeric>
#include <string>
#include <vector>

#include "gravprune/error.hpp"
#include "gravprune/gravity.hpp"
#include "gravprune/model.hpp"

namespace gravprune {

// How many filters a rate removes from a layer of N filters.
//   floor_removed: floor(N * rate) removed
//   floor_kept:    floor(N * (1 - rate)) kept
// At least one filter is always kept.
enum class Rounding { floor_removed, floor_kept };

inline std::string_view rounding_name(Rounding r) {
  return r == Rounding::floor_removed ? "floor-removed" : "floor-kept";
}

inline Rounding parse_rounding(std::string_view s) {
  if (s == "floor-removed") return Rounding::floor_removed;
  if (s == "floor-kept") return Rounding::floor_kept;
  throw ConfigError("unknown rounding '" + std::string(s) + "' (floor-removed|floor-kept)");
}

inline std::size_t removed_count(std::size_t filters, double rate, Rounding rounding = Rounding::floor_removed) {
  if (!(rate >= 0.0 && rate < 1.0)) throw ContractError("pruning rate must lie in [0, 1)");
  // The small slack keeps products such as 100 * 0.29 from flooring one short.
  constexpr double slack = 1e-9;
  const double n = static_cast<double>(filters);
  std::size_t removed = rounding == Rounding::floor_removed
                            ? static_cast<std::size_t>(std::floor(n * rate + slack))
                            : filters - std::min(filters, static_cast<std::size_t>(std::floor(n * (1.0 - rate) + slack)));
  return std::min(removed, filters == 0 ? 0 : filters - 1);
}

// Filter indices ordered by ascending L1 norm; equal norms keep index order.
template <typename T>
std::vector<std::size_t> rank_filters(const BasicTensor<T>& weight) {
  const auto masses = filter_masses(weight);
  std::vector<std::size_t> order(masses.size());
  std::iota(order.begin(), order.end(), 0);
  std::stable_sort(order.begin(), order.end(), [&](std::size_t a, std::size_t b) { return masses[a] < masses[b]; });
  return order;
}

// One step of the channel dependency walk from a conv's output.
struct ChannelDependent {
  enum class Role { batchnorm, conv_input, linear_input };
  std::size_t layer;
  Role role;
  std::size_t plane = 1;  // features per channel for linear_input (H*W at the flatten)
};

struct ChannelGroup {
  bool eligible = false;
  std::string reason;
  std::vector<ChannelDependent> dependents;
};

// Follows conv `layer`'s output channels through BN/ReLU/pooling to the
// layers whose parameters index them. Reaching a residual join, a shortcut
// or the model output makes the conv ineligible for pruning.
template <typename T>
ChannelGroup channel_group(const ModelGraph<T>& model, std::size_t layer) {
  ChannelGroup g;
  if (model.arch.layers[layer].kind != LayerKind::conv2d) {
    g.reason = "not a conv layer";
    return g;
  }
  std::vector<std::size_t> frontier{layer};
  std::vector<bool> seen(model.num_layers(), false);
  while (!frontier.empty()) {
    const std::size_t cur = frontier.back();
    frontier.pop_back();
    const auto cons = model.consumers(cur);
    if (cons.empty()) {
      g.reason = "feeds the model output";
      return g;
    }
    for (std::size_t c : cons) {
      if (seen[c]) continue;
      seen[c] = true;
      const auto& l = model.arch.layers[c];
      switch (l.kind) {
        case LayerKind::conv2d:
          g.dependents.push_back({c, ChannelDependent::Role::conv_input});
          break;
        case LayerKind::batchnorm:
          g.dependents.push_back({c, ChannelDependent::Role::batchnorm});
          frontier.push_back(c);
          break;
        case LayerKind::relu:
        case LayerKind::maxpool:
        case LayerKind::avgpool:
          frontier.push_back(c);
          break;
        case LayerKind::flatten: {
          const Shape in = model.input_shape_of(c);
          for (std::size_t lin : model.consumers(c)) {
            if (model.arch.layers[lin].kind != LayerKind::linear) {
              g.reason = "flatten output feeds a non-linear layer";
              return g;
            }
            g.dependents.push_back({lin, ChannelDependent::Role::linear_input, in[1] * in[2]});
          }
          if (model.consumers(c).empty()) {
            g.reason = "feeds the model output";
            return g;
          }
          break;
        }
        case LayerKind::add:
          g.reason = "feeds a residual join '" + l.name + "'";
          return g;
        case LayerKind::shortcut:
          g.reason = "feeds a shortcut '" + l.name + "'";
          return g;
        case LayerKind::linear:
          g.reason = "feeds linear '" + l.name + "' without flatten";
          return g;
      }
    }
  }
  g.eligible = true;
  return g;
}

template <typename T>
bool is_prunable(const ModelGraph<T>& model, std::size_t layer) {
  return model.arch.layers[layer].kind == LayerKind::conv2d && model.arch.layers[layer].prunable &&
         channel_group(model, layer).eligible;
}

// Default prune scope: every structurally prunable conv except the first
// conv of the network. In residual nets this leaves the block output convs
// and shortcuts at full width.
template <typename T>
std::vector<std::string> default_prune_scope(const ModelGraph<T>& model) {
  std::vector<std::string> out;
  bool first_conv = true;
  for (std::size_t i = 0; i < model.num_layers(); ++i) {
    if (model.arch.layers[i].kind != LayerKind::conv2d) continue;
    if (first_conv) {
      first_conv = false;
      continue;
    }
    if (is_prunable(model, i)) out.push_back(model.arch.layers[i].name);
  }
  return out;
}

struct LayerPlan {
  std::string layer;
  std::vector<bool> keep;
  std::vector<double> scores;  // L1 norms at plan time

  std::size_t kept() const { return static_cast<std::size_t>(std::count(keep.begin(), keep.end(), true)); }
  std::vector<std::size_t> kept_indices() const {
    std::vector<std::size_t> out;
    for (std::size_t i = 0; i < keep.size(); ++i)
      if (keep[i]) out.push_back(i);
    return out;
  }
  friend bool operator==(const LayerPlan&, const LayerPlan&) = default;
};

struct PruningPlan {
  double rate = 0.0;
  Rounding rounding = Rounding::floor_removed;
  std::vector<LayerPlan> layers;
  friend bool operator==(const PruningPlan&, const PruningPlan&) = default;
};

// Local pruning: in every listed layer remove the lowest-L1 filters at the
// same rate.
template <typename T>
PruningPlan make_pruning_plan(const ModelGraph<T>& model, double rate, const std::vector<std::string>& layers,
                              Rounding rounding = Rounding::floor_removed) {
  if (!(rate >= 0.0 && rate < 1.0)) throw ContractError("pruning rate must lie in [0, 1), got " + std::to_string(rate));
  PruningPlan plan{rate, rounding, {}};
  for (const auto& name : layers) {
    const int idx = model.index_of(name);
    if (idx < 0) throw ContractError("plan layer '" + name + "' does not exist");
    if (!is_prunable(model, static_cast<std::size_t>(idx)))
      throw ContractError("layer '" + name + "' is not prunable: " + channel_group(model, idx).reason);
    const auto& w = model.param(idx, "weight");
    const std::size_t N = w.dim(0);
    LayerPlan lp{name, std::vector<bool>(N, true), filter_masses(w)};
    const auto order = rank_filters(w);
    const std::size_t drop = removed_count(N, rate, rounding);
    for (std::size_t k = 0; k < drop; ++k) lp.keep[order[k]] = false;
    plan.layers.push_back(std::move(lp));
  }
  return plan;
}

namespace detail {

// Keeps entries `keep` along axis `axis` (grouped in blocks of `block`).
template <typename T>
BasicTensor<T> select_axis(const BasicTensor<T>& t, std::size_t axis, const std::vector<std::size_t>& keep,
                           std::size_t block = 1) {
  const Shape& s = t.shape();
  std::size_t outer = 1, inner = 1;
  for (std::size_t a = 0; a < axis; ++a) outer *= s[a];
  for (std::size_t a = axis + 1; a < s.size(); ++a) inner *= s[a];
  const std::size_t along = s[axis];
  Shape ns = s;
  ns[axis] = keep.size() * block;
  std::vector<T> out;
  out.reserve(shape_size(ns));
  for (std::size_t o = 0; o < outer; ++o)
    for (std::size_t k : keep)
      for (std::size_t b = 0; b < block; ++b) {
        const T* src = t.ptr() + (o * along + k * block + b) * inner;
        out.insert(out.end(), src, src + inner);
      }
  return BasicTensor<T>(ns, std::move(out));
}

}  // namespace detail

// Model surgery. Returns a new model in which every pruned filter's output
// channel is gone from its conv (weights and bias), from the BN that
// normalizes it, and from the input side of every consumer.
template <typename T>
ModelGraph<T> apply_plan(const ModelGraph<T>& model, const PruningPlan& plan) {
  ModelGraph<T> out = model;
  for (const auto& lp : plan.layers) {
    const int idx = model.index_of(lp.layer);
    if (idx < 0) throw ContractError("plan references unknown layer '" + lp.layer + "'");
    const auto group = channel_group(model, idx);
    if (!group.eligible || !model.arch.layers[idx].prunable)
      throw ContractError("plan references non-prunable layer '" + lp.layer + "'");
    const std::size_t N = model.arch.layers[idx].out_channels;
    if (lp.keep.size() != N)
      throw ContractError("plan mask for '" + lp.layer + "' has " + std::to_string(lp.keep.size()) +
                          " entries, layer has " + std::to_string(N) + " filters");
    const auto keep = lp.kept_indices();
    if (keep.empty()) throw ContractError("plan removes every filter of '" + lp.layer + "'");
    if (keep.size() == N) continue;

    auto& conv = out.arch.layers[idx];
    out.param(idx, "weight") = detail::select_axis(out.param(idx, "weight"), 0, keep);
    if (conv.bias) out.param(idx, "bias") = detail::select_axis(out.param(idx, "bias"), 0, keep);
    conv.out_channels = keep.size();

    for (const auto& dep : group.dependents) {
      auto& l = out.arch.layers[dep.layer];
      switch (dep.role) {
        case ChannelDependent::Role::batchnorm:
          for (auto& p : out.params[dep.layer]) p.value = detail::select_axis(p.value, 0, keep);
          l.in_channels = keep.size();
          break;
        case ChannelDependent::Role::conv_input:
          out.param(dep.layer, "weight") = detail::select_axis(out.param(dep.layer, "weight"), 1, keep);
          l.in_channels = keep.size();
          break;
        case ChannelDependent::Role::linear_input:
          out.param(dep.layer, "weight") = detail::select_axis(out.param(dep.layer, "weight"), 1, keep, dep.plane);
          l.in_channels = keep.size() * dep.plane;
          break;
      }
    }
  }
  validate_model(out);
  return out;
}

}  // namespace gravprune
