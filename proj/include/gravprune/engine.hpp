#pragma once

#include <algorithm>
#include <atomic>
#include <cmath>
#include <cstdint>
#include <limits>
#include <span>
#include <string>
#include <vector>

#include <Eigen/Core>

#include "gravprune/error.hpp"
#include "gravprune/model.hpp"
#include "gravprune/tensor.hpp"

namespace gravprune {

// Batch statistics in `train`, running statistics in `eval`.
enum class Mode { train, eval };

template <typename T>
struct LayerCache {
  BasicTensor<T> out;  // [B, ...]
  std::vector<T> mean, var, invstd;
  BasicTensor<T> xhat;
  std::vector<std::uint32_t> argmax;
};

template <typename T>
struct ForwardState {
  Mode mode = Mode::eval;
  std::vector<LayerCache<T>> layers;
};

// Gradients laid out like ModelGraph::params; non-trainable entries are empty.
template <typename T>
struct Gradients {
  std::vector<std::vector<BasicTensor<T>>> tensors;
  double loss = 0.0;

  BasicTensor<T>& at(const ModelGraph<T>& model, std::size_t layer, std::string_view name) {
    const auto& ps = model.params[layer];
    for (std::size_t j = 0; j < ps.size(); ++j)
      if (ps[j].name == name) return tensors[layer][j];
    throw ContractError("no gradient for '" + std::string(name) + "'");
  }
  const BasicTensor<T>& at(const ModelGraph<T>& model, std::size_t layer, std::string_view name) const {
    return const_cast<Gradients*>(this)->at(model, layer, name);
  }

  static Gradients zeros_like(const ModelGraph<T>& model) {
    Gradients g;
    g.tensors.resize(model.num_layers());
    for (std::size_t i = 0; i < model.num_layers(); ++i)
      for (const auto& p : model.params[i])
        g.tensors[i].push_back(p.trainable ? BasicTensor<T>(p.value.shape()) : BasicTensor<T>());
    return g;
  }
};

inline constexpr double kBatchNormEps = 1e-5;
inline constexpr double kBatchNormMomentum = 0.1;

// Counts every optimizer update applied by this process.
inline std::atomic<std::uint64_t>& optimizer_step_counter() {
  static std::atomic<std::uint64_t> counter{0};
  return counter;
}

namespace detail {

template <typename T>
using RowMat = Eigen::Matrix<T, Eigen::Dynamic, Eigen::Dynamic, Eigen::RowMajor>;
template <typename T>
using MatMap = Eigen::Map<RowMat<T>>;
template <typename T>
using ConstMatMap = Eigen::Map<const RowMat<T>>;

struct ConvGeom {
  std::size_t C, H, W, N, K, stride, pad, Ho, Wo;
  std::size_t ckk() const { return C * K * K; }
  std::size_t hw_out() const { return Ho * Wo; }
};

inline ConvGeom conv_geom(const LayerSpec& l, const Shape& in, const Shape& out) {
  return {in[0], in[1], in[2], l.out_channels, l.kernel, l.stride, l.padding, out[1], out[2]};
}

// Number of images processed per GEMM so the column buffer stays bounded.
inline std::size_t conv_chunk(const ConvGeom& g, std::size_t batch) {
  const std::size_t per_image = std::max<std::size_t>(1, g.ckk() * g.hw_out());
  return std::clamp<std::size_t>((std::size_t{1} << 22) / per_image, 1, batch);
}

// Writes one image into columns [col0, col0 + Ho*Wo) of a [CKK, ld] buffer.
template <typename T>
void im2col(const T* img, const ConvGeom& g, T* cols, std::size_t ld, std::size_t col0) {
  const std::ptrdiff_t pad = static_cast<std::ptrdiff_t>(g.pad);
  for (std::size_t c = 0; c < g.C; ++c)
    for (std::size_t kh = 0; kh < g.K; ++kh)
      for (std::size_t kw = 0; kw < g.K; ++kw) {
        T* row = cols + ((c * g.K + kh) * g.K + kw) * ld + col0;
        for (std::size_t oh = 0; oh < g.Ho; ++oh) {
          const std::ptrdiff_t ih = static_cast<std::ptrdiff_t>(oh * g.stride + kh) - pad;
          T* dst = row + oh * g.Wo;
          if (ih < 0 || ih >= static_cast<std::ptrdiff_t>(g.H)) {
            std::fill(dst, dst + g.Wo, T{0});
            continue;
          }
          const T* src = img + (c * g.H + ih) * g.W;
          for (std::size_t ow = 0; ow < g.Wo; ++ow) {
            const std::ptrdiff_t iw = static_cast<std::ptrdiff_t>(ow * g.stride + kw) - pad;
            dst[ow] = (iw < 0 || iw >= static_cast<std::ptrdiff_t>(g.W)) ? T{0} : src[iw];
          }
        }
      }
}

template <typename T>
void col2im_add(const T* cols, const ConvGeom& g, std::size_t ld, std::size_t col0, T* img) {
  const std::ptrdiff_t pad = static_cast<std::ptrdiff_t>(g.pad);
  for (std::size_t c = 0; c < g.C; ++c)
    for (std::size_t kh = 0; kh < g.K; ++kh)
      for (std::size_t kw = 0; kw < g.K; ++kw) {
        const T* row = cols + ((c * g.K + kh) * g.K + kw) * ld + col0;
        for (std::size_t oh = 0; oh < g.Ho; ++oh) {
          const std::ptrdiff_t ih = static_cast<std::ptrdiff_t>(oh * g.stride + kh) - pad;
          if (ih < 0 || ih >= static_cast<std::ptrdiff_t>(g.H)) continue;
          T* dst = img + (c * g.H + ih) * g.W;
          const T* src = row + oh * g.Wo;
          for (std::size_t ow = 0; ow < g.Wo; ++ow) {
            const std::ptrdiff_t iw = static_cast<std::ptrdiff_t>(ow * g.stride + kw) - pad;
            if (iw >= 0 && iw < static_cast<std::ptrdiff_t>(g.W)) dst[iw] += src[ow];
          }
        }
      }
}

template <typename T>
void conv_forward(const LayerSpec& l, const ModelGraph<T>& model, std::size_t idx, const BasicTensor<T>& x,
                  BasicTensor<T>& y) {
  const std::size_t B = x.dim(0);
  const ConvGeom g = conv_geom(l, model.input_shape_of(idx), model.out_shapes[idx]);
  const auto& w = model.param(idx, "weight");
  const T* bias = l.bias ? model.param(idx, "bias").ptr() : nullptr;
  const std::size_t chunk = conv_chunk(g, B);
  const std::size_t hw = g.hw_out();
  std::vector<T> cols(g.ckk() * chunk * hw);
  std::vector<T> outbuf(g.N * chunk * hw);
  ConstMatMap<T> W(w.ptr(), g.N, g.ckk());
  for (std::size_t b0 = 0; b0 < B; b0 += chunk) {
    const std::size_t nb = std::min(chunk, B - b0);
    const std::size_t ld = nb * hw;
    for (std::size_t j = 0; j < nb; ++j) im2col(x.ptr() + (b0 + j) * g.C * g.H * g.W, g, cols.data(), ld, j * hw);
    MatMap<T> out(outbuf.data(), g.N, ld);
    out.noalias() = W * ConstMatMap<T>(cols.data(), g.ckk(), ld);
    for (std::size_t j = 0; j < nb; ++j)
      for (std::size_t n = 0; n < g.N; ++n) {
        T* dst = y.ptr() + ((b0 + j) * g.N + n) * hw;
        const T* src = outbuf.data() + n * ld + j * hw;
        const T bv = bias ? bias[n] : T{0};
        for (std::size_t k = 0; k < hw; ++k) dst[k] = src[k] + bv;
      }
  }
}

template <typename T>
void conv_backward(const LayerSpec& l, const ModelGraph<T>& model, std::size_t idx, const BasicTensor<T>& x,
                   const BasicTensor<T>& dy, BasicTensor<T>* dx, BasicTensor<T>& dw, BasicTensor<T>* db) {
  const std::size_t B = x.dim(0);
  const ConvGeom g = conv_geom(l, model.input_shape_of(idx), model.out_shapes[idx]);
  const auto& w = model.param(idx, "weight");
  const std::size_t chunk = conv_chunk(g, B);
  const std::size_t hw = g.hw_out();
  std::vector<T> cols(g.ckk() * chunk * hw);
  std::vector<T> dout(g.N * chunk * hw);
  ConstMatMap<T> W(w.ptr(), g.N, g.ckk());
  MatMap<T> dW(dw.ptr(), g.N, g.ckk());
  for (std::size_t b0 = 0; b0 < B; b0 += chunk) {
    const std::size_t nb = std::min(chunk, B - b0);
    const std::size_t ld = nb * hw;
    for (std::size_t j = 0; j < nb; ++j) {
      im2col(x.ptr() + (b0 + j) * g.C * g.H * g.W, g, cols.data(), ld, j * hw);
      for (std::size_t n = 0; n < g.N; ++n) {
        const T* src = dy.ptr() + ((b0 + j) * g.N + n) * hw;
        std::copy(src, src + hw, dout.data() + n * ld + j * hw);
      }
    }
    ConstMatMap<T> D(dout.data(), g.N, ld);
    ConstMatMap<T> X(cols.data(), g.ckk(), ld);
    dW.noalias() += D * X.transpose();
    if (db)
      for (std::size_t n = 0; n < g.N; ++n) (*db)[n] += D.row(n).sum();
    if (dx) {
      RowMat<T> dcols = W.transpose() * D;
      for (std::size_t j = 0; j < nb; ++j)
        col2im_add(dcols.data(), g, ld, j * hw, dx->ptr() + (b0 + j) * g.C * g.H * g.W);
    }
  }
}

template <typename T>
void check_finite(const BasicTensor<T>& t, const std::string& what) {
  if (!t.all_finite()) throw NumericError("non-finite values in " + what);
}

inline double descend(double w, double g, double epsilon, double penalty) { return w - epsilon * (g + penalty); }

}  // namespace detail

// Runs the graph on `batch` ([B, C, H, W]); fills `state` with every layer's
// output (and what backward needs). Returns a reference to the logits.
template <typename T>
const BasicTensor<T>& forward(const ModelGraph<T>& model, const BasicTensor<T>& batch, Mode mode,
                              ForwardState<T>& state) {
  const Shape in_shape = model.input_shape();
  if (batch.rank() != 4 || !std::equal(in_shape.begin(), in_shape.end(), batch.shape().begin() + 1))
    throw ShapeError("batch shape " + shape_str(batch.shape()) + " does not match model input " + shape_str(in_shape));
  const std::size_t B = batch.dim(0);
  state.mode = mode;
  state.layers.resize(model.num_layers());
  for (std::size_t i = 0; i < model.num_layers(); ++i) {
    const auto& l = model.arch.layers[i];
    auto& cache = state.layers[i];
    const auto input = [&](std::size_t which) -> const BasicTensor<T>& {
      int src = l.inputs[which];
      return src == kModelInput ? batch : state.layers[src].out;
    };
    const BasicTensor<T>& x = input(0);
    Shape out_shape{B};
    out_shape.insert(out_shape.end(), model.out_shapes[i].begin(), model.out_shapes[i].end());
    BasicTensor<T>& y = cache.out;
    y = BasicTensor<T>(out_shape);
    switch (l.kind) {
      case LayerKind::conv2d:
        detail::conv_forward(l, model, i, x, y);
        break;
      case LayerKind::batchnorm: {
        const std::size_t C = x.dim(1), HW = x.size() / (B * C);
        const auto& gamma = model.param(i, "gamma");
        const auto& beta = model.param(i, "beta");
        cache.mean.assign(C, T{0});
        cache.var.assign(C, T{0});
        cache.invstd.assign(C, T{0});
        if (mode == Mode::train) {
          const T count = static_cast<T>(B * HW);
          for (std::size_t c = 0; c < C; ++c) {
            T s = 0;
            for (std::size_t b = 0; b < B; ++b) {
              const T* p = x.ptr() + (b * C + c) * HW;
              for (std::size_t k = 0; k < HW; ++k) s += p[k];
            }
            const T mean = s / count;
            T v = 0;
            for (std::size_t b = 0; b < B; ++b) {
              const T* p = x.ptr() + (b * C + c) * HW;
              for (std::size_t k = 0; k < HW; ++k) v += (p[k] - mean) * (p[k] - mean);
            }
            cache.mean[c] = mean;
            cache.var[c] = v / count;
          }
        } else {
          const auto& rm = model.param(i, "running_mean");
          const auto& rv = model.param(i, "running_var");
          for (std::size_t c = 0; c < C; ++c) {
            cache.mean[c] = rm[c];
            cache.var[c] = rv[c];
          }
        }
        cache.xhat = BasicTensor<T>(x.shape());
        for (std::size_t c = 0; c < C; ++c)
          cache.invstd[c] = T{1} / std::sqrt(cache.var[c] + static_cast<T>(kBatchNormEps));
        for (std::size_t b = 0; b < B; ++b)
          for (std::size_t c = 0; c < C; ++c) {
            const std::size_t off = (b * C + c) * HW;
            for (std::size_t k = 0; k < HW; ++k) {
              const T xh = (x[off + k] - cache.mean[c]) * cache.invstd[c];
              cache.xhat[off + k] = xh;
              y[off + k] = gamma[c] * xh + beta[c];
            }
          }
        break;
      }
      case LayerKind::relu:
        for (std::size_t k = 0; k < x.size(); ++k) y[k] = x[k] > T{0} ? x[k] : T{0};
        break;
      case LayerKind::maxpool:
      case LayerKind::avgpool: {
        const std::size_t C = x.dim(1), H = x.dim(2), W = x.dim(3);
        const std::size_t Ho = y.dim(2), Wo = y.dim(3);
        const bool global = l.kernel == 0;
        const std::size_t kh_n = global ? H : l.kernel, kw_n = global ? W : l.kernel;
        const std::size_t stride = global ? 1 : l.stride;
        if (l.kind == LayerKind::maxpool) cache.argmax.assign(y.size(), 0);
        const T inv_area = T{1} / static_cast<T>(kh_n * kw_n);
        for (std::size_t bc = 0; bc < B * C; ++bc) {
          const T* src = x.ptr() + bc * H * W;
          for (std::size_t oh = 0; oh < Ho; ++oh)
            for (std::size_t ow = 0; ow < Wo; ++ow) {
              const std::size_t o = (bc * Ho + oh) * Wo + ow;
              if (l.kind == LayerKind::maxpool) {
                std::size_t best = (oh * stride) * W + ow * stride;
                for (std::size_t kh = 0; kh < kh_n; ++kh)
                  for (std::size_t kw = 0; kw < kw_n; ++kw) {
                    const std::size_t p = (oh * stride + kh) * W + ow * stride + kw;
                    if (src[p] > src[best]) best = p;
                  }
                y[o] = src[best];
                cache.argmax[o] = static_cast<std::uint32_t>(best);
              } else {
                T s = 0;
                for (std::size_t kh = 0; kh < kh_n; ++kh)
                  for (std::size_t kw = 0; kw < kw_n; ++kw) s += src[(oh * stride + kh) * W + ow * stride + kw];
                y[o] = s * inv_area;
              }
            }
        }
        break;
      }
      case LayerKind::linear: {
        const std::size_t I = l.in_channels, O = l.out_channels;
        detail::ConstMatMap<T> X(x.ptr(), B, I);
        detail::ConstMatMap<T> Wt(model.param(i, "weight").ptr(), O, I);
        detail::MatMap<T> Y(y.ptr(), B, O);
        Y.noalias() = X * Wt.transpose();
        if (l.bias) {
          const auto& b = model.param(i, "bias");
          for (std::size_t r = 0; r < B; ++r)
            for (std::size_t o = 0; o < O; ++o) Y(r, o) += b[o];
        }
        break;
      }
      case LayerKind::flatten:
        std::copy(x.data().begin(), x.data().end(), y.data().begin());
        break;
      case LayerKind::add: {
        const BasicTensor<T>& x2 = input(1);
        for (std::size_t k = 0; k < y.size(); ++k) y[k] = x[k] + x2[k];
        break;
      }
      case LayerKind::shortcut: {
        const std::size_t C = x.dim(1), H = x.dim(2), W = x.dim(3);
        const std::size_t Co = y.dim(1), Ho = y.dim(2), Wo = y.dim(3);
        const std::size_t front = (Co - C) / 2;
        for (std::size_t b = 0; b < B; ++b)
          for (std::size_t c = 0; c < C; ++c)
            for (std::size_t oh = 0; oh < Ho; ++oh)
              for (std::size_t ow = 0; ow < Wo; ++ow)
                y[((b * Co + c + front) * Ho + oh) * Wo + ow] =
                    x[((b * C + c) * H + oh * l.stride) * W + ow * l.stride];
        break;
      }
    }
    detail::check_finite(y, "output of layer '" + l.name + "'");
  }
  return state.layers.back().out;
}

template <typename T>
BasicTensor<T> forward(const ModelGraph<T>& model, const BasicTensor<T>& batch, Mode mode = Mode::eval) {
  ForwardState<T> state;
  forward(model, batch, mode, state);
  return std::move(state.layers.back().out);
}

// Mean softmax cross-entropy; writes dL/dlogits when `dlogits` is given.
template <typename T>
double softmax_cross_entropy(const BasicTensor<T>& logits, std::span<const int> labels,
                             BasicTensor<T>* dlogits = nullptr) {
  const std::size_t B = logits.dim(0), K = logits.dim(1);
  if (labels.size() != B) throw ShapeError("label count does not match batch size");
  if (dlogits) *dlogits = BasicTensor<T>(logits.shape());
  T total = 0;
  for (std::size_t b = 0; b < B; ++b) {
    if (labels[b] < 0 || static_cast<std::size_t>(labels[b]) >= K)
      throw ContractError("label " + std::to_string(labels[b]) + " out of range for " + std::to_string(K) + " classes");
    const T* z = logits.ptr() + b * K;
    const T zmax = *std::max_element(z, z + K);
    T denom = 0;
    for (std::size_t k = 0; k < K; ++k) denom += std::exp(z[k] - zmax);
    const T log_denom = std::log(denom);
    total += log_denom - (z[labels[b]] - zmax);
    if (dlogits) {
      T* d = dlogits->ptr() + b * K;
      for (std::size_t k = 0; k < K; ++k) d[k] = std::exp(z[k] - zmax - log_denom) / static_cast<T>(B);
      d[labels[b]] -= T{1} / static_cast<T>(B);
    }
  }
  return static_cast<double>(total / static_cast<T>(B));
}

// Gradient of the mean cross-entropy with respect to every trainable
// parameter. Runs its own forward pass; `state` (optional) receives it.
template <typename T>
Gradients<T> backward(const ModelGraph<T>& model, const BasicTensor<T>& batch, std::span<const int> labels,
                      Mode mode = Mode::train, ForwardState<T>* state_out = nullptr) {
  ForwardState<T> local;
  ForwardState<T>& state = state_out ? *state_out : local;
  const BasicTensor<T>& logits = forward(model, batch, mode, state);
  const std::size_t B = batch.dim(0);
  Gradients<T> grads = Gradients<T>::zeros_like(model);

  std::vector<BasicTensor<T>> d(model.num_layers());
  grads.loss = softmax_cross_entropy(logits, labels, &d.back());

  const auto accumulate = [&](int src, const BasicTensor<T>& g) {
    if (src == kModelInput) return;
    auto& dst = d[src];
    if (dst.empty()) {
      dst = g;
    } else {
      for (std::size_t k = 0; k < g.size(); ++k) dst[k] += g[k];
    }
  };
  const auto input = [&](const LayerSpec& l, std::size_t which) -> const BasicTensor<T>& {
    int src = l.inputs[which];
    return src == kModelInput ? batch : state.layers[src].out;
  };

  for (std::size_t ii = model.num_layers(); ii-- > 0;) {
    const auto& l = model.arch.layers[ii];
    if (d[ii].empty()) continue;
    const BasicTensor<T>& dy = d[ii];
    const BasicTensor<T>& x = input(l, 0);
    const bool want_dx = l.inputs[0] != kModelInput;
    switch (l.kind) {
      case LayerKind::conv2d: {
        BasicTensor<T> dx = want_dx ? BasicTensor<T>(x.shape()) : BasicTensor<T>();
        detail::conv_backward(l, model, ii, x, dy, want_dx ? &dx : nullptr, grads.at(model, ii, "weight"),
                              l.bias ? &grads.at(model, ii, "bias") : nullptr);
        if (want_dx) accumulate(l.inputs[0], dx);
        break;
      }
      case LayerKind::batchnorm: {
        const auto& cache = state.layers[ii];
        const std::size_t C = x.dim(1), HW = x.size() / (B * C);
        const auto& gamma = model.param(ii, "gamma");
        auto& dgamma = grads.at(model, ii, "gamma");
        auto& dbeta = grads.at(model, ii, "beta");
        for (std::size_t c = 0; c < C; ++c) {
          T sg = 0, sb = 0;
          for (std::size_t b = 0; b < B; ++b) {
            const std::size_t off = (b * C + c) * HW;
            for (std::size_t k = 0; k < HW; ++k) {
              sg += dy[off + k] * cache.xhat[off + k];
              sb += dy[off + k];
            }
          }
          dgamma[c] = sg;
          dbeta[c] = sb;
        }
        if (!want_dx) break;
        BasicTensor<T> dx(x.shape());
        const T M = static_cast<T>(B * HW);
        for (std::size_t c = 0; c < C; ++c) {
          const T scale = gamma[c] * cache.invstd[c];
          for (std::size_t b = 0; b < B; ++b) {
            const std::size_t off = (b * C + c) * HW;
            for (std::size_t k = 0; k < HW; ++k) {
              if (state.mode == Mode::train)
                dx[off + k] = scale / M * (M * dy[off + k] - dbeta[c] - cache.xhat[off + k] * dgamma[c]);
              else
                dx[off + k] = scale * dy[off + k];
            }
          }
        }
        accumulate(l.inputs[0], dx);
        break;
      }
      case LayerKind::relu: {
        if (!want_dx) break;
        BasicTensor<T> dx(x.shape());
        for (std::size_t k = 0; k < x.size(); ++k) dx[k] = x[k] > T{0} ? dy[k] : T{0};
        accumulate(l.inputs[0], dx);
        break;
      }
      case LayerKind::maxpool:
      case LayerKind::avgpool: {
        if (!want_dx) break;
        BasicTensor<T> dx(x.shape());
        const std::size_t C = x.dim(1), H = x.dim(2), W = x.dim(3);
        const std::size_t Ho = dy.dim(2), Wo = dy.dim(3);
        const bool global = l.kernel == 0;
        const std::size_t kh_n = global ? H : l.kernel, kw_n = global ? W : l.kernel;
        const std::size_t stride = global ? 1 : l.stride;
        const T inv_area = T{1} / static_cast<T>(kh_n * kw_n);
        for (std::size_t bc = 0; bc < B * C; ++bc) {
          T* dst = dx.ptr() + bc * H * W;
          for (std::size_t oh = 0; oh < Ho; ++oh)
            for (std::size_t ow = 0; ow < Wo; ++ow) {
              const std::size_t o = (bc * Ho + oh) * Wo + ow;
              if (l.kind == LayerKind::maxpool) {
                dst[state.layers[ii].argmax[o]] += dy[o];
              } else {
                for (std::size_t kh = 0; kh < kh_n; ++kh)
                  for (std::size_t kw = 0; kw < kw_n; ++kw)
                    dst[(oh * stride + kh) * W + ow * stride + kw] += dy[o] * inv_area;
              }
            }
        }
        accumulate(l.inputs[0], dx);
        break;
      }
      case LayerKind::linear: {
        const std::size_t I = l.in_channels, O = l.out_channels;
        detail::ConstMatMap<T> X(x.ptr(), B, I);
        detail::ConstMatMap<T> DY(dy.ptr(), B, O);
        detail::MatMap<T> DW(grads.at(model, ii, "weight").ptr(), O, I);
        DW.noalias() += DY.transpose() * X;
        if (l.bias) {
          auto& db = grads.at(model, ii, "bias");
          for (std::size_t o = 0; o < O; ++o) db[o] += DY.col(o).sum();
        }
        if (want_dx) {
          BasicTensor<T> dx(x.shape());
          detail::MatMap<T> DX(dx.ptr(), B, I);
          DX.noalias() = DY * detail::ConstMatMap<T>(model.param(ii, "weight").ptr(), O, I);
          accumulate(l.inputs[0], dx);
        }
        break;
      }
      case LayerKind::flatten: {
        if (!want_dx) break;
        BasicTensor<T> dx(x.shape(), std::vector<T>(dy.data().begin(), dy.data().end()));
        accumulate(l.inputs[0], dx);
        break;
      }
      case LayerKind::add:
        accumulate(l.inputs[0], dy);
        accumulate(l.inputs[1], dy);
        break;
      case LayerKind::shortcut: {
        if (!want_dx) break;
        BasicTensor<T> dx(x.shape());
        const std::size_t C = x.dim(1), H = x.dim(2), W = x.dim(3);
        const std::size_t Co = dy.dim(1), Ho = dy.dim(2), Wo = dy.dim(3);
        const std::size_t front = (Co - C) / 2;
        for (std::size_t b = 0; b < B; ++b)
          for (std::size_t c = 0; c < C; ++c)
            for (std::size_t oh = 0; oh < Ho; ++oh)
              for (std::size_t ow = 0; ow < Wo; ++ow)
                dx[((b * C + c) * H + oh * l.stride) * W + ow * l.stride] +=
                    dy[((b * Co + c + front) * Ho + oh) * Wo + ow];
        accumulate(l.inputs[0], dx);
        break;
      }
    }
  }
  for (std::size_t i = 0; i < model.num_layers(); ++i)
    for (std::size_t j = 0; j < grads.tensors[i].size(); ++j)
      detail::check_finite(grads.tensors[i][j],
                           "gradient of " + model.arch.layers[i].name + "." + model.params[i][j].name);
  if (!std::isfinite(grads.loss)) throw NumericError("non-finite loss");
  return grads;
}

// Folds the batch statistics of a train-mode forward pass into the BN
// running averages (unbiased variance).
template <typename T>
void update_running_stats(ModelGraph<T>& model, const ForwardState<T>& state, std::size_t batch_size) {
  if (state.mode != Mode::train) return;
  const T m = static_cast<T>(kBatchNormMomentum);
  for (std::size_t i = 0; i < model.num_layers(); ++i) {
    if (model.arch.layers[i].kind != LayerKind::batchnorm) continue;
    const auto& cache = state.layers[i];
    auto& rm = model.param(i, "running_mean");
    auto& rv = model.param(i, "running_var");
    const std::size_t count = batch_size * shape_size(model.out_shapes[i]) / model.out_shapes[i][0];
    const T unbias = count > 1 ? static_cast<T>(count) / static_cast<T>(count - 1) : T{1};
    for (std::size_t c = 0; c < rm.size(); ++c) {
      rm[c] = (T{1} - m) * rm[c] + m * cache.mean[c];
      rv[c] = (T{1} - m) * rv[c] + m * cache.var[c] * unbias;
    }
  }
}

// w <- w - epsilon * g on every trainable parameter. The update is
// evaluated in double and rounded once.
template <typename T>
void sgd_step(ModelGraph<T>& model, const Gradients<T>& grads, double epsilon) {
  if (!(epsilon > 0.0)) throw ContractError("learning rate must be positive");
  for (std::size_t i = 0; i < model.num_layers(); ++i)
    for (std::size_t j = 0; j < model.params[i].size(); ++j) {
      auto& p = model.params[i][j];
      if (!p.trainable) continue;
      const auto& g = grads.tensors[i][j];
      if (g.shape() != p.value.shape()) throw ShapeError("gradient shape mismatch for " + model.arch.layers[i].name);
      for (std::size_t k = 0; k < g.size(); ++k)
        p.value[k] = static_cast<T>(detail::descend(p.value[k], g[k], epsilon, 0.0));
    }
  ++optimizer_step_counter();
}

}  // namespace gravprune
