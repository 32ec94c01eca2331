#pragma once

#include <cmath>
#include <cstdint>
#include <string>
#include <string_view>
#include <vector>

#include "gravprune/descriptor.hpp"
#include "gravprune/error.hpp"
#include "gravprune/rng.hpp"
#include "gravprune/tensor.hpp"

namespace gravprune {

template <typename T>
struct Param {
  std::string name;  // "weight", "bias", "gamma", "beta", "running_mean", "running_var"
  BasicTensor<T> value;
  bool trainable = true;

  friend bool operator==(const Param&, const Param&) = default;
};

// Ordered layer list plus per-layer parameters. Edges are the producer
// indices stored in each LayerSpec; `out_shapes` holds the per-sample output
// shape of every layer ([C,H,W] or [F]) as computed by shape inference.
template <typename T>
struct ModelGraph {
  ArchDescriptor arch;
  std::vector<std::vector<Param<T>>> params;
  std::vector<Shape> out_shapes;

  const std::vector<LayerSpec>& layers() const { return arch.layers; }
  std::size_t num_layers() const { return arch.layers.size(); }
  std::size_t num_classes() const { return out_shapes.back()[0]; }
  Shape input_shape() const { return {arch.input.channels, arch.input.height, arch.input.width}; }

  int index_of(std::string_view name) const { return arch.index_of(name); }

  int require_index(std::string_view name) const {
    int i = arch.index_of(name);
    if (i < 0) throw ContractError("no layer named '" + std::string(name) + "'");
    return i;
  }

  Shape input_shape_of(std::size_t layer, std::size_t which = 0) const {
    int src = arch.layers[layer].inputs.at(which);
    return src == kModelInput ? input_shape() : out_shapes[src];
  }

  BasicTensor<T>& param(std::size_t layer, std::string_view name) {
    for (auto& p : params[layer])
      if (p.name == name) return p.value;
    throw ContractError("layer '" + arch.layers[layer].name + "' has no parameter '" + std::string(name) + "'");
  }
  const BasicTensor<T>& param(std::size_t layer, std::string_view name) const {
    for (const auto& p : params[layer])
      if (p.name == name) return p.value;
    throw ContractError("layer '" + arch.layers[layer].name + "' has no parameter '" + std::string(name) + "'");
  }
  bool has_param(std::size_t layer, std::string_view name) const {
    for (auto& p : params[layer])
      if (p.name == name) return true;
    return false;
  }

  // Layers that read the output of `layer`.
  std::vector<std::size_t> consumers(std::size_t layer) const {
    std::vector<std::size_t> out;
    for (std::size_t i = 0; i < arch.layers.size(); ++i)
      for (int src : arch.layers[i].inputs)
        if (src == static_cast<int>(layer)) {
          out.push_back(i);
          break;
        }
    return out;
  }

  template <typename U>
  ModelGraph<U> cast() const {
    ModelGraph<U> m;
    m.arch = arch;
    m.out_shapes = out_shapes;
    m.params.resize(params.size());
    for (std::size_t i = 0; i < params.size(); ++i)
      for (const auto& p : params[i]) m.params[i].push_back({p.name, p.value.template cast<U>(), p.trainable});
    return m;
  }

  friend bool operator==(const ModelGraph&, const ModelGraph&) = default;
};

using Model = ModelGraph<float>;

namespace detail {

inline std::size_t conv_out(std::size_t in, std::size_t k, std::size_t stride, std::size_t pad, const LayerSpec& l) {
  if (in + 2 * pad < k)
    throw ShapeError("layer '" + l.name + "': kernel " + std::to_string(k) + " larger than padded input " +
                     std::to_string(in + 2 * pad));
  return (in + 2 * pad - k) / stride + 1;
}

}  // namespace detail

// Output spatial size of a convolution or pooling window.
inline std::size_t conv_output_size(std::size_t in, std::size_t kernel, std::size_t stride, std::size_t pad) {
  return (in + 2 * pad - kernel) / stride + 1;
}

// Fills in channel counts and per-layer output shapes, enforcing channel
// agreement along every edge and the single-output rule.
inline std::vector<Shape> infer_shapes(ArchDescriptor& arch) {
  std::vector<Shape> shapes;
  const Shape input = {arch.input.channels, arch.input.height, arch.input.width};
  std::vector<int> consumer_count(arch.layers.size(), 0);
  for (std::size_t i = 0; i < arch.layers.size(); ++i) {
    auto& l = arch.layers[i];
    const auto fail = [&](const std::string& msg) { return ShapeError("layer '" + l.name + "': " + msg); };
    std::vector<Shape> ins;
    for (int src : l.inputs) {
      if (src != kModelInput && (src < 0 || src >= static_cast<int>(i))) throw fail("input must be an earlier layer");
      if (src != kModelInput) ++consumer_count[src];
      ins.push_back(src == kModelInput ? input : shapes[src]);
    }
    const Shape& in = ins.at(0);
    const auto need_spatial = [&] {
      if (in.size() != 3) throw fail("expects a [C,H,W] input, got " + shape_str(in));
    };
    Shape out;
    switch (l.kind) {
      case LayerKind::conv2d:
        need_spatial();
        if (l.in_channels != 0 && l.in_channels != in[0])
          throw fail("declares " + std::to_string(l.in_channels) + " input channels but producer yields " +
                     std::to_string(in[0]));
        l.in_channels = in[0];
        out = {l.out_channels, detail::conv_out(in[1], l.kernel, l.stride, l.padding, l),
               detail::conv_out(in[2], l.kernel, l.stride, l.padding, l)};
        break;
      case LayerKind::batchnorm:
        need_spatial();
        if (l.in_channels != 0 && l.in_channels != in[0])
          throw fail("declares " + std::to_string(l.in_channels) + " channels but producer yields " +
                     std::to_string(in[0]));
        l.in_channels = in[0];
        out = in;
        break;
      case LayerKind::relu:
        out = in;
        break;
      case LayerKind::maxpool:
      case LayerKind::avgpool:
        need_spatial();
        if (l.kernel == 0)
          out = {in[0], 1, 1};
        else
          out = {in[0], detail::conv_out(in[1], l.kernel, l.stride, 0, l), detail::conv_out(in[2], l.kernel, l.stride, 0, l)};
        break;
      case LayerKind::linear:
        if (in.size() != 1) throw fail("expects a flat input, got " + shape_str(in) + " (insert a flatten layer)");
        if (l.in_channels != 0 && l.in_channels != in[0])
          throw fail("declares " + std::to_string(l.in_channels) + " input features but producer yields " +
                     std::to_string(in[0]));
        l.in_channels = in[0];
        out = {l.out_channels};
        break;
      case LayerKind::flatten:
        need_spatial();
        out = {shape_size(in)};
        break;
      case LayerKind::add:
        if (ins.size() != 2) throw fail("add needs two inputs");
        if (ins[0] != ins[1])
          throw fail("add inputs disagree: " + shape_str(ins[0]) + " vs " + shape_str(ins[1]));
        out = in;
        break;
      case LayerKind::shortcut:
        need_spatial();
        if (l.out_channels < in[0]) throw fail("shortcut cannot shrink channels");
        out = {l.out_channels, (in[1] + l.stride - 1) / l.stride, (in[2] + l.stride - 1) / l.stride};
        break;
    }
    shapes.push_back(std::move(out));
  }
  for (std::size_t i = 0; i + 1 < arch.layers.size(); ++i)
    if (consumer_count[i] == 0)
      throw ShapeError("layer '" + arch.layers[i].name + "' output is unused (model must have a single output)");
  if (shapes.back().size() != 1)
    throw ShapeError("last layer '" + arch.layers.back().name + "' must produce flat logits, got " +
                     shape_str(shapes.back()));
  return shapes;
}

// Allocates parameters for every layer. Kaiming-uniform on fan-in for conv
// and linear weights, zero biases, unit BN scale.
template <typename T>
void init_params(ModelGraph<T>& model, std::uint64_t seed) {
  Rng rng(seed);
  const bool zeros = model.arch.init == InitMode::zeros;
  model.params.assign(model.num_layers(), {});
  for (std::size_t i = 0; i < model.num_layers(); ++i) {
    const auto& l = model.arch.layers[i];
    auto& ps = model.params[i];
    const auto uniform_fill = [&](BasicTensor<T>& t, double fan_in) {
      const double bound = std::sqrt(6.0 / fan_in);
      for (auto& v : t.data()) v = zeros ? T{0} : static_cast<T>(rng.uniform(-bound, bound));
    };
    switch (l.kind) {
      case LayerKind::conv2d: {
        BasicTensor<T> w({l.out_channels, l.in_channels, l.kernel, l.kernel});
        uniform_fill(w, static_cast<double>(l.in_channels * l.kernel * l.kernel));
        ps.push_back({"weight", std::move(w), true});
        if (l.bias) ps.push_back({"bias", BasicTensor<T>({l.out_channels}), true});
        break;
      }
      case LayerKind::linear: {
        BasicTensor<T> w({l.out_channels, l.in_channels});
        uniform_fill(w, static_cast<double>(l.in_channels));
        ps.push_back({"weight", std::move(w), true});
        if (l.bias) ps.push_back({"bias", BasicTensor<T>({l.out_channels}), true});
        break;
      }
      case LayerKind::batchnorm:
        ps.push_back({"gamma", BasicTensor<T>({l.in_channels}, T{1}), true});
        ps.push_back({"beta", BasicTensor<T>({l.in_channels}), true});
        ps.push_back({"running_mean", BasicTensor<T>({l.in_channels}), false});
        ps.push_back({"running_var", BasicTensor<T>({l.in_channels}, T{1}), false});
        break;
      default:
        break;
    }
  }
}

template <typename T = float>
ModelGraph<T> build_model(ArchDescriptor arch, std::uint64_t seed) {
  ModelGraph<T> model;
  model.out_shapes = infer_shapes(arch);
  model.arch = std::move(arch);
  init_params(model, seed);
  return model;
}

template <typename T = float>
ModelGraph<T> build_model(std::string_view descriptor_text, std::uint64_t seed) {
  return build_model<T>(parse_descriptor(descriptor_text), seed);
}

// Re-checks graph invariants and parameter shapes (after surgery or load).
template <typename T>
void validate_model(ModelGraph<T>& model) {
  ArchDescriptor arch = model.arch;
  model.out_shapes = infer_shapes(arch);
  model.arch = arch;
  if (model.params.size() != model.num_layers()) throw ShapeError("parameter list does not match layer count");
  for (std::size_t i = 0; i < model.num_layers(); ++i) {
    const auto& l = model.arch.layers[i];
    const auto expect = [&](std::string_view name, const Shape& shape) {
      if (!model.has_param(i, name))
        throw ShapeError("layer '" + l.name + "' is missing parameter '" + std::string(name) + "'");
      if (model.param(i, name).shape() != shape)
        throw ShapeError("layer '" + l.name + "' parameter '" + std::string(name) + "' has shape " +
                         shape_str(model.param(i, name).shape()) + ", expected " + shape_str(shape));
    };
    std::size_t expected_count = 0;
    switch (l.kind) {
      case LayerKind::conv2d:
        expect("weight", {l.out_channels, l.in_channels, l.kernel, l.kernel});
        if (l.bias) expect("bias", {l.out_channels});
        expected_count = l.bias ? 2 : 1;
        break;
      case LayerKind::linear:
        expect("weight", {l.out_channels, l.in_channels});
        if (l.bias) expect("bias", {l.out_channels});
        expected_count = l.bias ? 2 : 1;
        break;
      case LayerKind::batchnorm:
        for (auto n : {"gamma", "beta", "running_mean", "running_var"}) expect(n, {l.in_channels});
        expected_count = 4;
        break;
      default:
        break;
    }
    if (model.params[i].size() != expected_count)
      throw ShapeError("layer '" + l.name + "' carries unexpected parameters");
  }
}

}  // namespace gravprune
