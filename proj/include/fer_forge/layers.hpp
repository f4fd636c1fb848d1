#pragma once

#include <cmath>
#include <cstdint>
#include <iostream>
#include <optional>
#include <string>
#include <string_view>
#include <utility>
#include <vector>

#include "fer_forge/rng.hpp"
#include "fer_forge/tensor.hpp"

namespace fer {

enum class LayerKind : std::uint32_t {
  kConv2D = 0,
  kMaxPool2D = 1,
  kDense = 2,
  kReLU = 3,
  kSoftmax = 4,
  kDropout = 5,
  kFlatten = 6,
};

inline std::string_view layer_kind_name(LayerKind kind) {
  switch (kind) {
    case LayerKind::kConv2D: return "Conv2D";
    case LayerKind::kMaxPool2D: return "MaxPool2D";
    case LayerKind::kDense: return "Dense";
    case LayerKind::kReLU: return "ReLU";
    case LayerKind::kSoftmax: return "Softmax";
    case LayerKind::kDropout: return "Dropout";
    case LayerKind::kFlatten: return "Flatten";
  }
  return "?";
}

struct LayerSpec {
  LayerKind kind = LayerKind::kReLU;
  std::size_t filters = 0;  // Conv2D
  std::size_t kernel = 3;   // Conv2D, square
  std::size_t stride = 1;   // Conv2D
  std::size_t padding = 0;  // Conv2D
  std::size_t units = 0;    // Dense
  double rate = 0.0;        // Dropout
  double l2 = 0.0;          // Dense weight penalty

  static LayerSpec conv(std::size_t filters, std::size_t kernel = 3, std::size_t padding = 0) {
    LayerSpec s;
    s.kind = LayerKind::kConv2D;
    s.filters = filters;
    s.kernel = kernel;
    s.padding = padding;
    return s;
  }
  static LayerSpec dense(std::size_t units, double l2 = 0.0) {
    LayerSpec s;
    s.kind = LayerKind::kDense;
    s.units = units;
    s.l2 = l2;
    return s;
  }
  static LayerSpec dropout(double rate) {
    LayerSpec s;
    s.kind = LayerKind::kDropout;
    s.rate = rate;
    return s;
  }
  static LayerSpec of(LayerKind kind) {
    LayerSpec s;
    s.kind = kind;
    return s;
  }

  void validate() const {
    switch (kind) {
      case LayerKind::kConv2D:
        if (filters < 1) throw ShapeError("Conv2D filter count must be >= 1");
        if (kernel < 1 || stride < 1) throw ShapeError("Conv2D kernel and stride must be >= 1");
        break;
      case LayerKind::kDense:
        if (units < 1) throw ShapeError("Dense unit count must be >= 1");
        if (!(l2 >= 0.0)) throw ShapeError("L2 penalty must be >= 0");
        break;
      case LayerKind::kDropout:
        if (!(rate >= 0.0 && rate < 1.0)) throw ShapeError("dropout rate must be in [0,1)");
        break;
      default:
        break;
    }
  }

  ConvGeometry geometry() const { return ConvGeometry{kernel, kernel, stride, padding}; }

  friend bool operator==(const LayerSpec&, const LayerSpec&) = default;
};

enum class Mode { kTrain, kInfer };

// ---------------------------------------------------------------------------
// Stateless kernels

template <typename T>
Tensor<T> relu_forward(const Tensor<T>& x) {
  Tensor<T> y = x;
  for (T& v : y.data()) v = v < T{} ? T{} : v;  // NaN passes through
  return y;
}

// Subgradient at exactly zero is zero.
template <typename T>
Tensor<T> relu_backward(const Tensor<T>& x, const Tensor<T>& grad_out) {
  if (x.shape() != grad_out.shape())
    throw ShapeError("relu_backward: shape " + shape_str(grad_out.shape()) +
                     " != " + shape_str(x.shape()));
  Tensor<T> g = grad_out;
  for (std::size_t i = 0; i < g.size(); ++i)
    if (!(x[i] > T{})) g[i] = T{};
  return g;
}

template <typename T>
Tensor<T> softmax_forward(const Tensor<T>& logits) {
  if (logits.empty()) throw ShapeError("softmax of an empty vector");
  T peak = logits[0];
  for (T v : logits.data()) {
    if (!std::isfinite(v)) throw std::domain_error("softmax: non-finite logit");
    peak = std::max(peak, v);
  }
  Tensor<T> p(logits.shape());
  T total{};
  for (std::size_t i = 0; i < p.size(); ++i) total += (p[i] = std::exp(logits[i] - peak));
  for (T& v : p.data()) v /= total;
  return p;
}

// Vector-Jacobian product of softmax: dL/dz_i = p_i (g_i - sum_j g_j p_j).
template <typename T>
Tensor<T> softmax_backward(const Tensor<T>& probs, const Tensor<T>& grad_out) {
  if (probs.shape() != grad_out.shape())
    throw ShapeError("softmax_backward: shape " + shape_str(grad_out.shape()) +
                     " != " + shape_str(probs.shape()));
  T dot{};
  for (std::size_t i = 0; i < probs.size(); ++i) dot += probs[i] * grad_out[i];
  Tensor<T> g(probs.shape());
  for (std::size_t i = 0; i < probs.size(); ++i) g[i] = probs[i] * (grad_out[i] - dot);
  return g;
}

template <typename T>
Tensor<T> dense_forward(const Tensor<T>& x, const Tensor<T>& weights, const Tensor<T>& bias) {
  if (x.rank() != 1 || weights.rank() != 2 || bias.rank() != 1)
    throw ShapeError("dense expects x[D], W[D,U], b[U]; got " + shape_str(x.shape()) + ", " +
                     shape_str(weights.shape()) + ", " + shape_str(bias.shape()));
  if (weights.dim(0) != x.dim(0) || weights.dim(1) != bias.dim(0))
    throw ShapeError("dense dimension mismatch: x " + shape_str(x.shape()) + ", W " +
                     shape_str(weights.shape()) + ", b " + shape_str(bias.shape()));
  const auto d = static_cast<Eigen::Index>(weights.dim(0));
  const auto u = static_cast<Eigen::Index>(weights.dim(1));
  Tensor<T> y = bias;
  MatrixMap<T>(y.data().data(), 1, u).noalias() +=
      ConstMatrixMap<T>(x.data().data(), 1, d) * ConstMatrixMap<T>(weights.data().data(), d, u);
  return y;
}

template <typename T>
struct DenseGradients {
  Tensor<T> grad_input;
  Tensor<T> grad_weights;
  Tensor<T> grad_bias;
};

template <typename T>
DenseGradients<T> dense_backward(const Tensor<T>& x, const Tensor<T>& weights,
                                 const Tensor<T>& grad_out) {
  if (grad_out.rank() != 1 || grad_out.dim(0) != weights.dim(1) || x.dim(0) != weights.dim(0))
    throw ShapeError("dense_backward: grad_out " + shape_str(grad_out.shape()) +
                     " incompatible with W " + shape_str(weights.shape()));
  const auto d = static_cast<Eigen::Index>(weights.dim(0));
  const auto u = static_cast<Eigen::Index>(weights.dim(1));
  DenseGradients<T> g{Tensor<T>(x.shape()), Tensor<T>(weights.shape()), grad_out};
  ConstMatrixMap<T> xm(x.data().data(), d, 1);
  ConstMatrixMap<T> gm(grad_out.data().data(), 1, u);
  MatrixMap<T>(g.grad_weights.data().data(), d, u).noalias() = xm * gm;
  MatrixMap<T>(g.grad_input.data().data(), 1, d).noalias() =
      gm * ConstMatrixMap<T>(weights.data().data(), d, u).transpose();
  return g;
}

// Inverted dropout. The mask holds the per-element multiplier (0 or 1/(1-r)),
// drawn from a counter-based stream so identical seeds give identical masks.
template <typename T>
struct DropoutResult {
  Tensor<T> output;
  Tensor<T> mask;
};

template <typename T>
DropoutResult<T> dropout_forward(const Tensor<T>& x, double rate, Mode mode, std::uint64_t seed) {
  if (!(rate >= 0.0 && rate < 1.0)) throw std::invalid_argument("dropout rate must be in [0,1)");
  if (mode == Mode::kInfer || rate == 0.0) return {x, Tensor<T>(x.shape(), T{1})};
  const T keep_scale = static_cast<T>(1.0 / (1.0 - rate));
  DropoutResult<T> r{x, Tensor<T>(x.shape())};
  for (std::size_t i = 0; i < x.size(); ++i) {
    r.mask[i] = counter_uniform(seed, i) < rate ? T{} : keep_scale;
    r.output[i] *= r.mask[i];
  }
  return r;
}

template <typename T>
Tensor<T> dropout_backward(const Tensor<T>& mask, const Tensor<T>& grad_out) {
  if (mask.shape() != grad_out.shape()) throw ShapeError("dropout_backward: shape mismatch");
  Tensor<T> g = grad_out;
  for (std::size_t i = 0; i < g.size(); ++i) g[i] *= mask[i];
  return g;
}

template <typename T>
Tensor<T> flatten(const Tensor<T>& x) {
  return x.reshape({x.size()});
}

template <typename T>
T l2_penalty(double penalty, const Tensor<T>& weights) {
  T sq{};
  for (T w : weights.data()) sq += w * w;
  return static_cast<T>(penalty) * sq;
}

// Adds d/dw (penalty * sum w^2) = 2 * penalty * w into `grad`.
template <typename T>
void add_l2_gradient(double penalty, const Tensor<T>& weights, Tensor<T>& grad, T scale = T{1}) {
  const T k = static_cast<T>(2.0 * penalty) * scale;
  for (std::size_t i = 0; i < grad.size(); ++i) grad[i] += k * weights[i];
}

inline constexpr double kProbabilityFloor = 1e-12;

template <typename T>
struct L2Term {
  double penalty;
  const Tensor<T>* weights;
};

// Categorical cross-entropy against a one-hot target plus L2 terms.
template <typename T>
double cross_entropy_loss(const Tensor<T>& probs, const Tensor<T>& target_onehot,
                          const std::vector<L2Term<T>>& l2_terms = {}) {
  if (probs.shape() != target_onehot.shape())
    throw ShapeError("cross_entropy_loss: probs " + shape_str(probs.shape()) + " vs target " +
                     shape_str(target_onehot.shape()));
  std::size_t truth = target_onehot.size();
  for (std::size_t i = 0; i < target_onehot.size(); ++i)
    if (target_onehot[i] == T{1}) truth = i;
  if (truth == target_onehot.size())
    throw std::invalid_argument("cross_entropy_loss: target has no component equal to 1");
  double p = static_cast<double>(probs[truth]);
  if (!(p > kProbabilityFloor)) {
    std::clog << "warning: degenerate probability " << p << " at true class " << truth
              << " clamped to " << kProbabilityFloor << '\n';
    p = kProbabilityFloor;
  }
  double loss = -std::log(p);
  for (const auto& term : l2_terms) loss += static_cast<double>(l2_penalty(term.penalty, *term.weights));
  return loss;
}

// Gradient of softmax + cross-entropy with respect to the logits.
template <typename T>
Tensor<T> softmax_cross_entropy_grad(const Tensor<T>& probs, const Tensor<T>& target_onehot) {
  if (probs.shape() != target_onehot.shape()) throw ShapeError("softmax_cross_entropy_grad: shape mismatch");
  Tensor<T> g = probs;
  for (std::size_t i = 0; i < g.size(); ++i) g[i] -= target_onehot[i];
  return g;
}

// ---------------------------------------------------------------------------
// Bound layers

template <typename T>
struct Layer {
  LayerSpec spec;
  Shape in_shape;
  Shape out_shape;
  std::vector<Tensor<T>> params;  // Conv2D: {kernels, bias}; Dense: {weights, bias}
};

// Saved values from the last forward pass through one layer.
template <typename T>
struct LayerCache {
  Tensor<T> input;
  Tensor<T> output;
  Tensor<T> mask;
  PoolIndex pool;
};

inline Shape infer_output_shape(const LayerSpec& spec, const Shape& in) {
  spec.validate();
  switch (spec.kind) {
    case LayerKind::kConv2D: {
      if (in.size() != 3)
        throw ShapeError("Conv2D needs a [C,H,W] input, got " + shape_str(in));
      const ConvGeometry g = spec.geometry();
      return {spec.filters, g.out_h(in[1]), g.out_w(in[2])};
    }
    case LayerKind::kMaxPool2D:
      if (in.size() != 3 || in[1] < 2 || in[2] < 2)
        throw ShapeError("MaxPool2D needs a [C,H,W] input with H,W >= 2, got " + shape_str(in));
      return {in[0], in[1] / 2, in[2] / 2};
    case LayerKind::kDense:
      if (in.size() != 1)
        throw ShapeError("Dense needs a flat input, got " + shape_str(in) + " (missing Flatten?)");
      return {spec.units};
    case LayerKind::kFlatten:
      return {shape_numel(in)};
    case LayerKind::kSoftmax:
      if (in.size() != 1) throw ShapeError("Softmax needs a flat input, got " + shape_str(in));
      return in;
    case LayerKind::kReLU:
    case LayerKind::kDropout:
      return in;
  }
  throw ShapeError("unknown layer kind");
}

inline std::vector<Shape> parameter_shapes(const LayerSpec& spec, const Shape& in) {
  switch (spec.kind) {
    case LayerKind::kConv2D:
      return {{spec.filters, in.at(0), spec.kernel, spec.kernel}, {spec.filters}};
    case LayerKind::kDense:
      return {{in.at(0), spec.units}, {spec.units}};
    default:
      return {};
  }
}

template <typename T>
Layer<T> bind_layer(const LayerSpec& spec, const Shape& in_shape) {
  Layer<T> layer{spec, in_shape, infer_output_shape(spec, in_shape), {}};
  for (const Shape& s : parameter_shapes(spec, in_shape)) layer.params.emplace_back(s);
  return layer;
}

template <typename T>
Tensor<T> layer_forward(const Layer<T>& layer, LayerCache<T>& cache, const Tensor<T>& x, Mode mode,
                        std::uint64_t dropout_seed) {
  if (x.shape() != layer.in_shape)
    throw ShapeError(std::string(layer_kind_name(layer.spec.kind)) + " expected input " +
                     shape_str(layer.in_shape) + ", got " + shape_str(x.shape()));
  switch (layer.spec.kind) {
    case LayerKind::kConv2D:
      cache.input = x;
      return conv2d_forward(x, layer.params[0], layer.params[1], layer.spec.geometry());
    case LayerKind::kMaxPool2D: {
      auto r = maxpool_forward(x);
      cache.pool = std::move(r.index);
      return std::move(r.output);
    }
    case LayerKind::kDense:
      cache.input = x;
      return dense_forward(x, layer.params[0], layer.params[1]);
    case LayerKind::kReLU:
      cache.input = x;
      return relu_forward(x);
    case LayerKind::kSoftmax:
      cache.output = softmax_forward(x);
      return cache.output;
    case LayerKind::kDropout: {
      auto r = dropout_forward(x, layer.spec.rate, mode, dropout_seed);
      cache.mask = std::move(r.mask);
      return std::move(r.output);
    }
    case LayerKind::kFlatten:
      return flatten(x);
  }
  throw ShapeError("unknown layer kind");
}

// Returns dL/dx and adds parameter gradients into `param_grads`.
template <typename T>
Tensor<T> layer_backward(const Layer<T>& layer, const LayerCache<T>& cache,
                         const Tensor<T>& grad_out, std::vector<Tensor<T>>& param_grads) {
  switch (layer.spec.kind) {
    case LayerKind::kConv2D: {
      auto g = conv2d_backward(cache.input, layer.params[0], layer.spec.geometry(), grad_out);
      for (std::size_t i = 0; i < g.grad_kernels.size(); ++i) param_grads[0][i] += g.grad_kernels[i];
      for (std::size_t i = 0; i < g.grad_bias.size(); ++i) param_grads[1][i] += g.grad_bias[i];
      return std::move(g.grad_input);
    }
    case LayerKind::kMaxPool2D:
      return maxpool_backward(cache.pool, grad_out);
    case LayerKind::kDense: {
      const auto d = static_cast<Eigen::Index>(layer.params[0].dim(0));
      const auto u = static_cast<Eigen::Index>(layer.params[0].dim(1));
      ConstMatrixMap<T> xm(cache.input.data().data(), d, 1);
      ConstMatrixMap<T> gm(grad_out.data().data(), 1, u);
      MatrixMap<T>(param_grads[0].data().data(), d, u).noalias() += xm * gm;
      for (std::size_t i = 0; i < grad_out.size(); ++i) param_grads[1][i] += grad_out[i];
      Tensor<T> gx(layer.in_shape);
      MatrixMap<T>(gx.data().data(), 1, d).noalias() =
          gm * ConstMatrixMap<T>(layer.params[0].data().data(), d, u).transpose();
      return gx;
    }
    case LayerKind::kReLU:
      return relu_backward(cache.input, grad_out);
    case LayerKind::kSoftmax:
      return softmax_backward(cache.output, grad_out);
    case LayerKind::kDropout:
      return dropout_backward(cache.mask, grad_out);
    case LayerKind::kFlatten:
      return grad_out.reshape(layer.in_shape);
  }
  throw ShapeError("unknown layer kind");
}

}  // namespace fer
