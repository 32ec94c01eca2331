#pragma once

#include <algorithm>
#include <cmath>
#include <cstdint>
#include <filesystem>
#include <numeric>
#include <span>
#include <string>
#include <vector>

#include "gravprune/checkpoint.hpp"
#include "gravprune/error.hpp"
#include "gravprune/rng.hpp"
#include "gravprune/tensor.hpp"

namespace gravprune {

// In-memory labelled image set, samples stored [N, C, H, W].
struct Dataset {
  Shape sample_shape;
  std::size_t classes = 0;
  std::vector<float> images;
  std::vector<int> labels;

  std::size_t size() const { return labels.size(); }
  std::size_t sample_size() const { return shape_size(sample_shape); }

  Tensor batch(std::span<const std::size_t> indices, bool flip = false, Rng* rng = nullptr) const {
    Shape shape{indices.size()};
    shape.insert(shape.end(), sample_shape.begin(), sample_shape.end());
    Tensor out(shape);
    const std::size_t S = sample_size();
    for (std::size_t b = 0; b < indices.size(); ++b) {
      const float* src = images.data() + indices[b] * S;
      float* dst = out.ptr() + b * S;
      if (flip && rng && (rng->next() & 1u)) {
        const std::size_t W = sample_shape[2], rows = S / W;
        for (std::size_t r = 0; r < rows; ++r)
          for (std::size_t w = 0; w < W; ++w) dst[r * W + w] = src[r * W + (W - 1 - w)];
      } else {
        std::copy(src, src + S, dst);
      }
    }
    return out;
  }

  std::vector<int> batch_labels(std::span<const std::size_t> indices) const {
    std::vector<int> out(indices.size());
    for (std::size_t b = 0; b < indices.size(); ++b) out[b] = labels[indices[b]];
    return out;
  }

  void append(const Dataset& other) {
    if (!labels.empty() && (other.sample_shape != sample_shape || other.classes != classes))
      throw FormatError("cannot concatenate datasets of different layouts");
    if (labels.empty()) {
      sample_shape = other.sample_shape;
      classes = other.classes;
    }
    images.insert(images.end(), other.images.begin(), other.images.end());
    labels.insert(labels.end(), other.labels.begin(), other.labels.end());
  }
};

struct DatasetSplit {
  Dataset train;
  Dataset test;
};

// Per-channel standardization with statistics taken from `reference`.
inline void normalize_channels(const Dataset& reference, std::span<Dataset* const> targets) {
  const std::size_t C = reference.sample_shape.at(0);
  const std::size_t plane = reference.sample_size() / C;
  std::vector<double> mean(C, 0.0), var(C, 0.0);
  const double count = static_cast<double>(reference.size() * plane);
  for (std::size_t i = 0; i < reference.size(); ++i)
    for (std::size_t c = 0; c < C; ++c) {
      const float* p = reference.images.data() + (i * C + c) * plane;
      for (std::size_t k = 0; k < plane; ++k) mean[c] += p[k];
    }
  for (auto& m : mean) m /= count;
  for (std::size_t i = 0; i < reference.size(); ++i)
    for (std::size_t c = 0; c < C; ++c) {
      const float* p = reference.images.data() + (i * C + c) * plane;
      for (std::size_t k = 0; k < plane; ++k) var[c] += (p[k] - mean[c]) * (p[k] - mean[c]);
    }
  for (auto* ds : targets)
    for (std::size_t i = 0; i < ds->size(); ++i)
      for (std::size_t c = 0; c < C; ++c) {
        const double sd = std::sqrt(var[c] / count) + 1e-8;
        float* p = ds->images.data() + (i * C + c) * plane;
        for (std::size_t k = 0; k < plane; ++k) p[k] = static_cast<float>((p[k] - mean[c]) / sd);
      }
}

// CIFAR binary records: `label_bytes` label bytes (1 for CIFAR-10, 2 for
// CIFAR-100 where the second is the fine label) followed by 3x32x32 pixel
// bytes, channel-major.
inline Dataset parse_cifar_records(std::span<const unsigned char> bytes, std::size_t classes,
                                   std::size_t label_bytes = 1, const std::string& source = "<memory>") {
  constexpr std::size_t kPixels = 3 * 32 * 32;
  const std::size_t record = label_bytes + kPixels;
  if (bytes.size() % record != 0) {
    const std::size_t offset = bytes.size() - bytes.size() % record;
    throw FormatError(source + ": truncated CIFAR record at byte offset " + std::to_string(offset) + " (record size " +
                      std::to_string(record) + ", file size " + std::to_string(bytes.size()) + ")");
  }
  Dataset ds;
  ds.sample_shape = {3, 32, 32};
  ds.classes = classes;
  const std::size_t n = bytes.size() / record;
  ds.images.resize(n * kPixels);
  ds.labels.resize(n);
  for (std::size_t i = 0; i < n; ++i) {
    const unsigned char* r = bytes.data() + i * record;
    const int label = r[label_bytes - 1];
    if (static_cast<std::size_t>(label) >= classes)
      throw FormatError(source + ": label " + std::to_string(label) + " out of range at byte offset " +
                        std::to_string(i * record + label_bytes - 1));
    ds.labels[i] = label;
    for (std::size_t k = 0; k < kPixels; ++k) ds.images[i * kPixels + k] = r[label_bytes + k] / 255.0f;
  }
  return ds;
}

inline Dataset load_cifar_file(const std::filesystem::path& path, std::size_t classes, std::size_t label_bytes = 1) {
  const auto bytes = read_file(path);
  return parse_cifar_records(bytes, classes, label_bytes, path.string());
}

struct SyntheticSpec {
  std::size_t classes = 4;
  std::size_t train_samples = 2000;
  std::size_t test_samples = 1000;
  std::size_t channels = 3;
  std::size_t height = 16;
  std::size_t width = 16;
  std::size_t blobs_per_class = 3;
  double noise = 0.5;
  double jitter = 2.0;  // max blob centre shift in pixels
  std::uint64_t seed = 1;
};

// "Blobs as images": each class owns a few coloured Gaussian blobs at fixed
// positions; a sample renders them with jittered centres and amplitudes on a
// noisy background, plus one distractor blob borrowed from another class.
inline DatasetSplit make_synthetic(const SyntheticSpec& spec) {
  if (spec.classes < 2 || spec.train_samples == 0 || spec.test_samples == 0 || spec.channels == 0 ||
      spec.height == 0 || spec.width == 0 || spec.blobs_per_class == 0)
    throw ConfigError("synthetic dataset parameters must be positive (and at least two classes)");
  struct Blob {
    double cy, cx, radius;
    std::vector<double> color;
  };
  Rng proto_rng(mix_seed(spec.seed, 0));
  std::vector<std::vector<Blob>> protos(spec.classes);
  for (auto& blobs : protos)
    for (std::size_t b = 0; b < spec.blobs_per_class; ++b) {
      Blob blob{proto_rng.uniform(0.15, 0.85) * spec.height, proto_rng.uniform(0.15, 0.85) * spec.width,
                proto_rng.uniform(0.08, 0.18) * static_cast<double>(std::min(spec.height, spec.width)), {}};
      for (std::size_t c = 0; c < spec.channels; ++c) blob.color.push_back(proto_rng.uniform(-1.0, 1.0));
      blobs.push_back(std::move(blob));
    }

  const auto render = [&](std::size_t count, std::uint64_t tag) {
    Dataset ds;
    ds.sample_shape = {spec.channels, spec.height, spec.width};
    ds.classes = spec.classes;
    const std::size_t S = ds.sample_size();
    ds.images.assign(count * S, 0.0f);
    ds.labels.resize(count);
    Rng rng(mix_seed(spec.seed, tag));
    for (std::size_t i = 0; i < count; ++i) {
      const int label = static_cast<int>(i % spec.classes);
      ds.labels[i] = label;
      float* img = ds.images.data() + i * S;
      const auto draw = [&](const Blob& blob, double amp) {
        const double cy = blob.cy + rng.uniform(-spec.jitter, spec.jitter);
        const double cx = blob.cx + rng.uniform(-spec.jitter, spec.jitter);
        const double inv = 1.0 / (2.0 * blob.radius * blob.radius);
        for (std::size_t y = 0; y < spec.height; ++y)
          for (std::size_t x = 0; x < spec.width; ++x) {
            const double dy = static_cast<double>(y) - cy, dx = static_cast<double>(x) - cx;
            const double v = amp * std::exp(-(dy * dy + dx * dx) * inv);
            for (std::size_t c = 0; c < spec.channels; ++c)
              img[(c * spec.height + y) * spec.width + x] += static_cast<float>(v * blob.color[c]);
          }
      };
      for (const auto& blob : protos[label]) draw(blob, rng.uniform(0.6, 1.4));
      const std::size_t other = (label + 1 + rng.below(spec.classes - 1)) % spec.classes;
      draw(protos[other][rng.below(spec.blobs_per_class)], rng.uniform(0.3, 0.9));
      for (std::size_t k = 0; k < S; ++k) img[k] += static_cast<float>(spec.noise * rng.normal());
    }
    // Interleaved labels are shuffled so that batches do not follow class order.
    std::vector<std::size_t> perm(count);
    std::iota(perm.begin(), perm.end(), 0);
    rng.shuffle(std::span<std::size_t>(perm));
    Dataset shuffled = ds;
    for (std::size_t i = 0; i < count; ++i) {
      std::copy_n(ds.images.data() + perm[i] * S, S, shuffled.images.data() + i * S);
      shuffled.labels[i] = ds.labels[perm[i]];
    }
    return shuffled;
  };
  DatasetSplit split{render(spec.train_samples, 1), render(spec.test_samples, 2)};
  Dataset* targets[] = {&split.train, &split.test};
  normalize_channels(split.train, targets);
  return split;
}

}  // namespace gravprune
