#pragma once

// Gravity regularizer for convolutional filters.
//
// Within a conv layer every filter n has a mass m_n = ||W_n||_1. One filter
// (the attractor, index p1) pulls on all others with
//
//     F_n = G * m1 * m_n / d_n^2,   d_n = 1 / |p1 - n|
//
// so the pull grows with index distance. The layer penalty is alpha_g * sum F_n
// and its gradient with respect to a weight w of filter n (m1 held constant)
// is alpha_g * G * m1 * (p1 - n)^2 * sign(w). The attractor feels no force.

#include <algorithm>
#include <cmath>
#include <cstdint>
#include <limits>
#include <optional>
#include <span>
#include <sstream>
#include <string>
#include <vector>

#include "gravprune/engine.hpp"
#include "gravprune/error.hpp"
#include "gravprune/model.hpp"
#include "gravprune/tensor.hpp"

namespace gravprune {

inline constexpr double kGravitationalConstant = 6.7e-11;

enum class AttractorMode { max_mass, index_zero };

inline std::string_view attractor_mode_name(AttractorMode m) {
  return m == AttractorMode::max_mass ? "max-mass" : "index-zero";
}

struct GravityConfig {
  double G = kGravitationalConstant;
  double alpha_g = 0.0;
  AttractorMode attractor_mode = AttractorMode::max_mass;
  std::vector<std::string> prune_layers;  // conv layer names (the penalized set)
  bool recompute_attractor = true;        // false: attractor fixed per epoch

  bool penalizes(std::string_view layer) const {
    return std::find(prune_layers.begin(), prune_layers.end(), layer) != prune_layers.end();
  }
};

// Stable 64-bit fingerprint of a gravity configuration (FNV-1a over a
// canonical rendering), stored in checkpoints.
inline std::uint64_t gravity_config_hash(const GravityConfig& cfg) {
  std::ostringstream os;
  os.precision(17);
  os << "G=" << cfg.G << ";alpha_g=" << cfg.alpha_g << ";mode=" << attractor_mode_name(cfg.attractor_mode)
     << ";recompute=" << cfg.recompute_attractor << ";layers=";
  for (const auto& l : cfg.prune_layers) os << l << ',';
  std::uint64_t h = 0xcbf29ce484222325ULL;
  for (unsigned char c : os.str()) {
    h ^= c;
    h *= 0x100000001b3ULL;
  }
  return h;
}

template <typename T>
void validate_gravity_config(const GravityConfig& cfg, const ModelGraph<T>& model) {
  if (!(cfg.G > 0.0)) throw ConfigError("gravity G must be positive");
  if (!(cfg.alpha_g >= 0.0)) throw ConfigError("gravity alpha_g must be non-negative");
  for (const auto& name : cfg.prune_layers) {
    const int idx = model.index_of(name);
    if (idx < 0) throw ConfigError("gravity layer '" + name + "' does not exist");
    if (model.arch.layers[idx].kind != LayerKind::conv2d)
      throw ConfigError("gravity layer '" + name + "' is not a conv layer");
  }
}

// L1 norm of one filter's weights (bias is not part of the mass).
template <typename T>
double filter_mass(std::span<const T> filter) {
  double m = 0.0;
  for (T v : filter) m += std::abs(static_cast<double>(v));
  return m;
}

template <typename T>
std::vector<double> filter_masses(const BasicTensor<T>& weight) {
  std::vector<double> masses(weight.dim(0));
  for (std::size_t n = 0; n < masses.size(); ++n) masses[n] = filter_mass(weight.slice(n));
  return masses;
}

// max-mass: argmax with ties going to the lowest index. index-zero: 0.
inline std::size_t select_attractor(std::span<const double> masses, AttractorMode mode) {
  if (masses.empty()) throw ContractError("cannot select an attractor in an empty layer");
  if (mode == AttractorMode::index_zero) return 0;
  std::size_t best = 0;
  for (std::size_t n = 1; n < masses.size(); ++n)
    if (masses[n] > masses[best]) best = n;
  return best;
}

// Inverted index distance 1/|p1 - pn|. The attractor never queries itself.
inline double distance(std::size_t attractor, std::size_t filter) {
  if (attractor == filter) throw ContractError("distance of the attractor to itself is undefined");
  const double gap = attractor > filter ? static_cast<double>(attractor - filter) : static_cast<double>(filter - attractor);
  return 1.0 / gap;
}

inline double gravity_force(double attractor_mass, double filter_mass_value, double dist, double G) {
  if (!(dist > 0.0)) throw ContractError("gravity distance must be positive");
  return G * attractor_mass * filter_mass_value / (dist * dist);
}

// (p1 - pn)^2, i.e. 1/d^2, computed exactly in integers.
inline double inverse_square_distance(std::size_t attractor, std::size_t filter) {
  const std::size_t gap = attractor > filter ? attractor - filter : filter - attractor;
  return static_cast<double>(gap) * static_cast<double>(gap);
}

struct LayerGravityState {
  std::vector<double> masses;
  std::size_t attractor = 0;
  std::vector<double> distances;  // +inf for the attractor
  std::vector<double> forces;     // 0 for the attractor
  double total_force = 0.0;
};

template <typename T>
LayerGravityState layer_penalty(const BasicTensor<T>& weight, const GravityConfig& cfg,
                                std::optional<std::size_t> attractor = std::nullopt) {
  LayerGravityState st;
  st.masses = filter_masses(weight);
  st.attractor = attractor ? *attractor : select_attractor(st.masses, cfg.attractor_mode);
  if (st.attractor >= st.masses.size()) throw ContractError("attractor index out of range");
  const std::size_t N = st.masses.size();
  st.distances.assign(N, std::numeric_limits<double>::infinity());
  st.forces.assign(N, 0.0);
  const double m1 = st.masses[st.attractor];
  for (std::size_t n = 0; n < N; ++n) {
    if (n == st.attractor) continue;
    st.distances[n] = distance(st.attractor, n);
    st.forces[n] = cfg.G * m1 * st.masses[n] * inverse_square_distance(st.attractor, n);
    st.total_force += st.forces[n];
  }
  return st;
}

// Per-filter coefficient alpha_g * G * m1 * (p1 - pn)^2; zero for the attractor.
inline std::vector<double> penalty_coefficients(const LayerGravityState& st, const GravityConfig& cfg) {
  std::vector<double> coef(st.masses.size(), 0.0);
  const double m1 = st.masses[st.attractor];
  for (std::size_t n = 0; n < coef.size(); ++n)
    if (n != st.attractor) coef[n] = cfg.alpha_g * cfg.G * m1 * inverse_square_distance(st.attractor, n);
  return coef;
}

template <typename T>
T sign_of(T v) {
  return v > T{0} ? T{1} : (v < T{0} ? T{-1} : T{0});
}

template <typename T>
BasicTensor<T> penalty_gradient(const BasicTensor<T>& weight, const GravityConfig& cfg,
                                std::optional<std::size_t> attractor = std::nullopt) {
  const auto st = layer_penalty(weight, cfg, attractor);
  const auto coef = penalty_coefficients(st, cfg);
  BasicTensor<T> grad(weight.shape());
  const std::size_t inner = weight.inner_size();
  for (std::size_t n = 0; n < coef.size(); ++n)
    for (std::size_t k = 0; k < inner; ++k)
      grad[n * inner + k] = static_cast<T>(coef[n] * sign_of(static_cast<double>(weight[n * inner + k])));
  return grad;
}

// alpha_g * total force of one layer.
template <typename T>
double penalty_value(const BasicTensor<T>& weight, const GravityConfig& cfg,
                     std::optional<std::size_t> attractor = std::nullopt) {
  return cfg.alpha_g * layer_penalty(weight, cfg, attractor).total_force;
}

// One attractor per penalized layer, keyed by layer index; used when the
// attractor is frozen for an epoch.
using AttractorMap = std::vector<std::optional<std::size_t>>;

// w <- w - epsilon * (g + alpha_g * G * m1 * (p1 - pn)^2 * sign(w)) for conv
// weights of penalized layers; plain SGD for everything else. Returns the
// gravity state each penalized layer was updated with (indexed by layer).
template <typename T>
std::vector<std::optional<LayerGravityState>> regularized_update(ModelGraph<T>& model, const Gradients<T>& grads,
                                                                 const GravityConfig& cfg, double epsilon,
                                                                 const AttractorMap* attractors = nullptr) {
  if (!(epsilon > 0.0)) throw ContractError("learning rate must be positive");
  std::vector<std::optional<LayerGravityState>> states(model.num_layers());
  for (std::size_t i = 0; i < model.num_layers(); ++i) {
    const auto& layer = model.arch.layers[i];
    const bool penalized = layer.kind == LayerKind::conv2d && cfg.penalizes(layer.name);
    for (std::size_t j = 0; j < model.params[i].size(); ++j) {
      auto& p = model.params[i][j];
      if (!p.trainable) continue;
      const auto& g = grads.tensors[i][j];
      if (g.shape() != p.value.shape()) throw ShapeError("gradient shape mismatch for " + layer.name);
      if (penalized && p.name == "weight") {
        std::optional<std::size_t> fixed;
        if (attractors && i < attractors->size()) fixed = (*attractors)[i];
        states[i] = layer_penalty(p.value, cfg, fixed);
        const auto coef = penalty_coefficients(*states[i], cfg);
        const std::size_t inner = p.value.inner_size();
        for (std::size_t n = 0; n < coef.size(); ++n)
          for (std::size_t k = n * inner; k < (n + 1) * inner; ++k) {
            const double w = p.value[k];
            p.value[k] = static_cast<T>(detail::descend(w, g[k], epsilon, coef[n] * sign_of(w)));
          }
      } else {
        for (std::size_t k = 0; k < g.size(); ++k)
          p.value[k] = static_cast<T>(detail::descend(p.value[k], g[k], epsilon, 0.0));
      }
    }
  }
  ++optimizer_step_counter();
  return states;
}

struct StepResult {
  double loss = 0.0;
  std::size_t correct = 0;
  std::vector<std::optional<LayerGravityState>> gravity;
};

// Data gradient on one batch followed by the gravity-augmented update.
template <typename T>
StepResult regularized_step(ModelGraph<T>& model, const BasicTensor<T>& batch, std::span<const int> labels,
                            const GravityConfig& cfg, double epsilon, const AttractorMap* attractors = nullptr) {
  ForwardState<T> state;
  auto grads = backward(model, batch, labels, Mode::train, &state);
  StepResult r;
  r.loss = grads.loss;
  const auto& logits = state.layers.back().out;
  const std::size_t K = logits.dim(1);
  for (std::size_t b = 0; b < labels.size(); ++b) {
    const T* z = logits.ptr() + b * K;
    if (static_cast<int>(std::max_element(z, z + K) - z) == labels[b]) ++r.correct;
  }
  update_running_stats(model, state, batch.dim(0));
  r.gravity = regularized_update(model, grads, cfg, epsilon, attractors);
  return r;
}

}  // namespace gravprune
