#pragma once

// Parameter and FLOP accounting. FLOPs are 2 * multiply-accumulates and are
// charged to conv and linear layers only; BN, activations, pooling, joins
// and shortcuts count as zero. Parameters are the trainable tensors (conv
// and linear weights and biases, BN scale and shift); BN running statistics
// are buffers and not counted.

#include <cstdint>
#include <ostream>
#include <string>
#include <utility>
#include <vector>

#include "gravprune/error.hpp"
#include "gravprune/model.hpp"

namespace gravprune {

struct LayerCost {
  std::string layer;
  LayerKind kind;
  std::uint64_t params = 0;
  std::uint64_t flops = 0;
};

struct CostReport {
  std::vector<LayerCost> layers;
  std::uint64_t total_params = 0;
  std::uint64_t total_flops = 0;
};

template <typename T>
CostReport cost_model(const ModelGraph<T>& model) {
  CostReport r;
  for (std::size_t i = 0; i < model.num_layers(); ++i) {
    const auto& l = model.arch.layers[i];
    LayerCost c{l.name, l.kind, 0, 0};
    for (const auto& p : model.params[i])
      if (p.trainable) c.params += p.value.size();
    if (l.kind == LayerKind::conv2d) {
      const auto& out = model.out_shapes[i];
      c.flops = 2ull * l.out_channels * l.in_channels * l.kernel * l.kernel * out[1] * out[2];
    } else if (l.kind == LayerKind::linear) {
      c.flops = 2ull * l.out_channels * l.in_channels;
    }
    r.total_params += c.params;
    r.total_flops += c.flops;
    r.layers.push_back(std::move(c));
  }
  return r;
}

struct Ratios {
  double speedup = 1.0;
  double compression = 1.0;
};

inline Ratios speedup_compression(const CostReport& base, const CostReport& pruned) {
  if (pruned.total_flops == 0 || pruned.total_params == 0)
    throw ContractError("pruned model has zero cost; ratios are undefined");
  return {static_cast<double>(base.total_flops) / static_cast<double>(pruned.total_flops),
          static_cast<double>(base.total_params) / static_cast<double>(pruned.total_params)};
}

inline void write_cost_csv(std::ostream& os, const CostReport& r) {
  os << "layer_id,kind,params,flops\n";
  for (const auto& c : r.layers) os << c.layer << ',' << kind_name(c.kind) << ',' << c.params << ',' << c.flops << '\n';
  os << "total,," << r.total_params << ',' << r.total_flops << '\n';
}

}  // namespace gravprune
