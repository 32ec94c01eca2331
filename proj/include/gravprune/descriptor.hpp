#pragma once

// Architecture descriptor: a line-oriented text format.
//
//   gravprune-arch 1
//   input <channels> <height> <width>
//   init kaiming|zeros
//   <kind> [<name>] [key=value ...]
//
// Kinds and keys:
//   conv2d     out=N k=K [stride=1] [pad=0] [bias=0|1] [cin=C] [prune=0|1]
//   batchnorm  [channels=C]
//   relu
//   maxpool    k=K [stride=K]
//   avgpool    k=K [stride=K]     k=0 pools globally
//   flatten
//   linear     out=F [bias=1] [in_features=F]
//   add        in=<a>,<b>
//   shortcut   out=C [stride=1]    strided subsample + zero channel padding
//
// Every layer reads the previous layer unless `in=<name>` says otherwise; the
// first layer reads the model input. `#` starts a comment. Unnamed layers
// are named <kind><index>.

#include <charconv>
#include <cstddef>
#include <map>
#include <optional>
#include <sstream>
#include <string>
#include <string_view>
#include <vector>

#include "gravprune/error.hpp"

namespace gravprune {

enum class LayerKind { conv2d, batchnorm, relu, maxpool, avgpool, linear, add, flatten, shortcut };

inline constexpr int kModelInput = -1;

inline std::string_view kind_name(LayerKind kind) {
  switch (kind) {
    case LayerKind::conv2d: return "conv2d";
    case LayerKind::batchnorm: return "batchnorm";
    case LayerKind::relu: return "relu";
    case LayerKind::maxpool: return "maxpool";
    case LayerKind::avgpool: return "avgpool";
    case LayerKind::linear: return "linear";
    case LayerKind::add: return "add";
    case LayerKind::flatten: return "flatten";
    case LayerKind::shortcut: return "shortcut";
  }
  return "?";
}

inline std::optional<LayerKind> parse_kind(std::string_view s) {
  for (auto k : {LayerKind::conv2d, LayerKind::batchnorm, LayerKind::relu, LayerKind::maxpool, LayerKind::avgpool,
                 LayerKind::linear, LayerKind::add, LayerKind::flatten, LayerKind::shortcut})
    if (kind_name(k) == s) return k;
  if (s == "conv") return LayerKind::conv2d;
  if (s == "bn") return LayerKind::batchnorm;
  return std::nullopt;
}

struct LayerSpec {
  std::string name;
  LayerKind kind = LayerKind::relu;
  std::vector<int> inputs;  // producer indices; kModelInput for the model input
  std::size_t out_channels = 0;  // conv filters N, linear out features, shortcut width
  std::size_t in_channels = 0;   // conv C, linear in features, batchnorm channels (filled by shape inference)
  std::size_t kernel = 0;
  std::size_t stride = 1;
  std::size_t padding = 0;
  bool bias = false;
  bool prunable = true;  // descriptor opt-out; structural eligibility is checked separately

  bool has_params() const {
    return kind == LayerKind::conv2d || kind == LayerKind::batchnorm || kind == LayerKind::linear;
  }
  friend bool operator==(const LayerSpec&, const LayerSpec&) = default;
};

struct InputSpec {
  std::size_t channels = 0;
  std::size_t height = 0;
  std::size_t width = 0;
  friend bool operator==(const InputSpec&, const InputSpec&) = default;
};

enum class InitMode { kaiming, zeros };

struct ArchDescriptor {
  InputSpec input;
  InitMode init = InitMode::kaiming;
  std::vector<LayerSpec> layers;

  int index_of(std::string_view name) const {
    for (std::size_t i = 0; i < layers.size(); ++i)
      if (layers[i].name == name) return static_cast<int>(i);
    return kModelInput - 1;
  }
  friend bool operator==(const ArchDescriptor&, const ArchDescriptor&) = default;
};

inline constexpr unsigned kDescriptorVersion = 1;

namespace detail {

inline std::vector<std::string> split_ws(std::string_view line) {
  std::vector<std::string> out;
  std::istringstream is{std::string(line)};
  std::string tok;
  while (is >> tok) out.push_back(tok);
  return out;
}

inline std::size_t parse_size(std::string_view s, int line_no, std::string_view what) {
  std::size_t v = 0;
  auto [p, ec] = std::from_chars(s.data(), s.data() + s.size(), v);
  if (ec != std::errc{} || p != s.data() + s.size())
    throw ParseError("line " + std::to_string(line_no) + ": bad integer '" + std::string(s) + "' for " +
                     std::string(what));
  return v;
}

}  // namespace detail

inline ArchDescriptor parse_descriptor(std::string_view text) {
  ArchDescriptor arch;
  bool have_header = false;
  bool have_input = false;
  std::istringstream is{std::string(text)};
  std::string raw;
  int line_no = 0;
  while (std::getline(is, raw)) {
    ++line_no;
    if (auto hash = raw.find('#'); hash != std::string::npos) raw.erase(hash);
    auto toks = detail::split_ws(raw);
    if (toks.empty()) continue;
    const auto err = [&](const std::string& msg) { return ParseError("line " + std::to_string(line_no) + ": " + msg); };

    if (!have_header) {
      if (toks[0] != "gravprune-arch" || toks.size() != 2) throw err("expected 'gravprune-arch <version>' header");
      if (detail::parse_size(toks[1], line_no, "version") != kDescriptorVersion)
        throw err("unsupported descriptor version " + toks[1]);
      have_header = true;
      continue;
    }
    if (toks[0] == "input") {
      if (toks.size() != 4) throw err("expected 'input <channels> <height> <width>'");
      arch.input = {detail::parse_size(toks[1], line_no, "channels"), detail::parse_size(toks[2], line_no, "height"),
                    detail::parse_size(toks[3], line_no, "width")};
      if (arch.input.channels == 0 || arch.input.height == 0 || arch.input.width == 0)
        throw err("input dimensions must be positive");
      have_input = true;
      continue;
    }
    if (toks[0] == "init") {
      if (toks.size() != 2 || (toks[1] != "kaiming" && toks[1] != "zeros")) throw err("expected 'init kaiming|zeros'");
      arch.init = toks[1] == "zeros" ? InitMode::zeros : InitMode::kaiming;
      continue;
    }

    auto kind = parse_kind(toks[0]);
    if (!kind) throw err("unknown layer kind '" + toks[0] + "'");
    LayerSpec spec;
    spec.kind = *kind;
    std::size_t first_kv = 1;
    if (toks.size() > 1 && toks[1].find('=') == std::string::npos) {
      spec.name = toks[1];
      first_kv = 2;
    } else {
      spec.name = std::string(kind_name(*kind)) + std::to_string(arch.layers.size());
    }
    if (arch.index_of(spec.name) >= kModelInput) throw err("duplicate layer name '" + spec.name + "'");

    std::map<std::string, std::string> kv;
    for (std::size_t i = first_kv; i < toks.size(); ++i) {
      auto eq = toks[i].find('=');
      if (eq == std::string::npos || eq == 0) throw err("expected key=value, got '" + toks[i] + "'");
      if (!kv.emplace(toks[i].substr(0, eq), toks[i].substr(eq + 1)).second)
        throw err("repeated key '" + toks[i].substr(0, eq) + "'");
    }
    const auto take = [&](const std::string& key) -> std::optional<std::string> {
      auto it = kv.find(key);
      if (it == kv.end()) return std::nullopt;
      std::string v = it->second;
      kv.erase(it);
      return v;
    };
    const auto take_size = [&](const std::string& key, std::optional<std::size_t> dflt) -> std::size_t {
      if (auto v = take(key)) return detail::parse_size(*v, line_no, key);
      if (!dflt) throw err(std::string(kind_name(spec.kind)) + " requires " + key + "=");
      return *dflt;
    };
    const auto take_bool = [&](const std::string& key, bool dflt) {
      auto v = take(key);
      if (!v) return dflt;
      if (*v == "1" || *v == "true") return true;
      if (*v == "0" || *v == "false") return false;
      throw err("bad boolean for " + key + ": '" + *v + "'");
    };

    if (auto in = take("in")) {
      std::string_view rest = *in;
      while (!rest.empty()) {
        auto comma = rest.find(',');
        std::string ref(rest.substr(0, comma));
        if (ref == "input") {
          spec.inputs.push_back(kModelInput);
        } else {
          int idx = arch.index_of(ref);
          if (idx < 0) throw err("unknown input layer '" + ref + "' (inputs must be declared earlier)");
          spec.inputs.push_back(idx);
        }
        rest = comma == std::string_view::npos ? std::string_view{} : rest.substr(comma + 1);
      }
    } else if (spec.kind != LayerKind::add) {
      spec.inputs.push_back(static_cast<int>(arch.layers.size()) - 1);
    }

    switch (spec.kind) {
      case LayerKind::conv2d:
        spec.out_channels = take_size("out", std::nullopt);
        spec.kernel = take_size("k", std::nullopt);
        spec.stride = take_size("stride", 1);
        spec.padding = take_size("pad", 0);
        spec.bias = take_bool("bias", false);
        spec.in_channels = take_size("cin", 0);
        spec.prunable = take_bool("prune", true);
        if (spec.out_channels == 0 || spec.kernel == 0 || spec.stride == 0)
          throw err("conv2d out, k and stride must be positive");
        break;
      case LayerKind::maxpool:
      case LayerKind::avgpool:
        spec.kernel = take_size("k", std::nullopt);
        spec.stride = take_size("stride", spec.kernel == 0 ? 1 : spec.kernel);
        if (spec.kind == LayerKind::maxpool && spec.kernel == 0) throw err("maxpool needs k > 0");
        if (spec.stride == 0) throw err("pool stride must be positive");
        break;
      case LayerKind::linear:
        spec.out_channels = take_size("out", std::nullopt);
        spec.bias = take_bool("bias", true);
        spec.in_channels = take_size("in_features", 0);
        if (spec.out_channels == 0) throw err("linear out must be positive");
        break;
      case LayerKind::shortcut:
        spec.out_channels = take_size("out", std::nullopt);
        spec.stride = take_size("stride", 1);
        if (spec.stride == 0) throw err("shortcut stride must be positive");
        break;
      case LayerKind::add:
        if (spec.inputs.size() != 2) throw err("add requires in=<a>,<b>");
        break;
      case LayerKind::batchnorm:
        spec.in_channels = take_size("channels", 0);
        break;
      case LayerKind::relu:
      case LayerKind::flatten:
        break;
    }
    if (spec.kind != LayerKind::add && spec.inputs.size() != 1) throw err("layer takes exactly one input");
    if (!kv.empty()) throw err("unknown key '" + kv.begin()->first + "' for " + std::string(kind_name(spec.kind)));
    arch.layers.push_back(std::move(spec));
  }
  if (!have_header) throw ParseError("empty descriptor");
  if (!have_input) throw ParseError("descriptor has no 'input' line");
  if (arch.layers.empty()) throw ParseError("descriptor declares no layers");
  return arch;
}

// Writes a descriptor that parses back to the same ArchDescriptor (inferred
// channel counts are written explicitly).
inline std::string format_descriptor(const ArchDescriptor& arch) {
  std::ostringstream os;
  os << "gravprune-arch " << kDescriptorVersion << "\n";
  os << "input " << arch.input.channels << ' ' << arch.input.height << ' ' << arch.input.width << "\n";
  os << "init " << (arch.init == InitMode::zeros ? "zeros" : "kaiming") << "\n";
  for (std::size_t i = 0; i < arch.layers.size(); ++i) {
    const auto& l = arch.layers[i];
    os << kind_name(l.kind) << ' ' << l.name;
    const bool default_input = l.kind != LayerKind::add && l.inputs.size() == 1 &&
                               l.inputs[0] == static_cast<int>(i) - 1;
    if (!default_input) {
      os << " in=";
      for (std::size_t j = 0; j < l.inputs.size(); ++j)
        os << (j ? "," : "") << (l.inputs[j] == kModelInput ? std::string("input") : arch.layers[l.inputs[j]].name);
    }
    switch (l.kind) {
      case LayerKind::conv2d:
        os << " out=" << l.out_channels << " k=" << l.kernel << " stride=" << l.stride << " pad=" << l.padding
           << " bias=" << l.bias;
        if (l.in_channels) os << " cin=" << l.in_channels;
        if (!l.prunable) os << " prune=0";
        break;
      case LayerKind::maxpool:
      case LayerKind::avgpool:
        os << " k=" << l.kernel << " stride=" << l.stride;
        break;
      case LayerKind::linear:
        os << " out=" << l.out_channels << " bias=" << l.bias;
        if (l.in_channels) os << " in_features=" << l.in_channels;
        break;
      case LayerKind::shortcut:
        os << " out=" << l.out_channels << " stride=" << l.stride;
        break;
      case LayerKind::batchnorm:
        if (l.in_channels) os << " channels=" << l.in_channels;
        break;
      default:
        break;
    }
    os << "\n";
  }
  return os.str();
}

}  // namespace gravprune
