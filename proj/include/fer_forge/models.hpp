#pragma once

#include <algorithm>
#include <cmath>
#include <cstdint>
#include <optional>
#include <span>
#include <stdexcept>
#include <string>
#include <string_view>
#include <vector>

#include "fer_forge/layers.hpp"
#include "fer_forge/rng.hpp"
#include "fer_forge/tensor.hpp"

namespace fer {

inline constexpr std::size_t kNumClasses = 7;
inline constexpr std::size_t kImageSide = 48;

enum class Architecture { kFeedForward, kSimpleCnn, kProposedCnn };

inline std::string_view architecture_name(Architecture a) {
  switch (a) {
    case Architecture::kFeedForward: return "ffnn";
    case Architecture::kSimpleCnn: return "simple_cnn";
    case Architecture::kProposedCnn: return "proposed_cnn";
  }
  return "?";
}

inline std::optional<Architecture> parse_architecture(std::string_view name) {
  if (name == "ffnn") return Architecture::kFeedForward;
  if (name == "simple_cnn") return Architecture::kSimpleCnn;
  if (name == "proposed_cnn") return Architecture::kProposedCnn;
  return std::nullopt;
}

// Knobs the architecture tables leave open. Defaults reproduce the reference
// configuration; the gradient checker shrinks them to toy sizes.
struct ModelOptions {
  std::size_t input_side = kImageSide;
  std::size_t padding = 0;        // 0 = valid, 1 = same for 3x3 kernels
  std::size_t max_channels = 0;   // 0 = uncapped
  std::size_t ffnn_hidden1 = 1024;
  std::size_t ffnn_hidden2 = 512;
  std::size_t simple_dense = 128;
  std::size_t proposed_dense = 512;
  double l2_penalty = 0.001;
  std::uint64_t seed = 42;
};

template <typename T>
class Network {
 public:
  Network() = default;

  // Binds every layer against the running shape; throws ShapeError on the
  // first incompatible adjacency. Parameters start at zero.
  Network(std::vector<LayerSpec> specs, Shape input_shape) : input_shape_(std::move(input_shape)) {
    if (specs.empty()) throw ShapeError("network needs at least one layer");
    Shape shape = input_shape_;
    for (std::size_t i = 0; i < specs.size(); ++i) {
      try {
        layers_.push_back(bind_layer<T>(specs[i], shape));
      } catch (const ShapeError& e) {
        throw ShapeError("layer " + std::to_string(i) + " (" +
                         std::string(layer_kind_name(specs[i].kind)) + "): " + e.what());
      }
      shape = layers_.back().out_shape;
    }
    if (layers_.back().spec.kind != LayerKind::kSoftmax || shape != Shape{kNumClasses})
      throw ShapeError("network must end in a Softmax over " + std::to_string(kNumClasses) +
                       " outputs, ends in " + std::string(layer_kind_name(layers_.back().spec.kind)) +
                       " with shape " + shape_str(shape));
  }

  const Shape& input_shape() const { return input_shape_; }
  const std::vector<Layer<T>>& layers() const { return layers_; }
  std::vector<Layer<T>>& layers() { return layers_; }

  std::vector<LayerSpec> specs() const {
    std::vector<LayerSpec> s;
    for (const auto& l : layers_) s.push_back(l.spec);
    return s;
  }

  std::size_t parameter_count() const {
    std::size_t n = 0;
    for (const auto& l : layers_)
      for (const auto& p : l.params) n += p.size();
    return n;
  }

  std::vector<Tensor<T>*> parameters() {
    std::vector<Tensor<T>*> out;
    for (auto& l : layers_)
      for (auto& p : l.params) out.push_back(&p);
    return out;
  }
  std::vector<const Tensor<T>*> parameters() const {
    std::vector<const Tensor<T>*> out;
    for (const auto& l : layers_)
      for (const auto& p : l.params) out.push_back(&p);
    return out;
  }

  // He-uniform for layers feeding a ReLU, Glorot-uniform for the layer
  // feeding the softmax; biases zero.
  void initialize(std::uint64_t seed) {
    for (std::size_t i = 0; i < layers_.size(); ++i) {
      auto& l = layers_[i];
      if (l.params.empty()) continue;
      auto& w = l.params[0];
      std::size_t fan_in = 0, fan_out = 0;
      if (l.spec.kind == LayerKind::kConv2D) {
        const std::size_t receptive = w.dim(2) * w.dim(3);
        fan_in = w.dim(1) * receptive;
        fan_out = w.dim(0) * receptive;
      } else {
        fan_in = w.dim(0);
        fan_out = w.dim(1);
      }
      const bool feeds_softmax = next_parametric_is_softmax(i);
      const double limit = feeds_softmax ? std::sqrt(6.0 / static_cast<double>(fan_in + fan_out))
                                         : std::sqrt(6.0 / static_cast<double>(fan_in));
      const std::uint64_t s = derive_seed(seed, SeedStream::kInit, i);
      for (std::size_t k = 0; k < w.size(); ++k)
        w[k] = static_cast<T>((2.0 * counter_uniform(s, k) - 1.0) * limit);
      l.params[1].fill(T{});
    }
  }

  template <typename U>
  Network<U> cast() const {
    Network<U> out(specs(), input_shape_);
    for (std::size_t i = 0; i < layers_.size(); ++i)
      for (std::size_t p = 0; p < layers_[i].params.size(); ++p)
        out.layers()[i].params[p] = layers_[i].params[p].template cast<U>();
    return out;
  }

 private:
  bool next_parametric_is_softmax(std::size_t i) const {
    for (std::size_t j = i + 1; j < layers_.size(); ++j) {
      const LayerKind k = layers_[j].spec.kind;
      if (k == LayerKind::kSoftmax) return true;
      if (k == LayerKind::kReLU || !layers_[j].params.empty()) return false;
    }
    return false;
  }

  Shape input_shape_;
  std::vector<Layer<T>> layers_;
};

// ---------------------------------------------------------------------------
// Architectures

inline std::size_t capped(std::size_t channels, const ModelOptions& o) {
  return o.max_channels == 0 ? channels : std::min(channels, o.max_channels);
}

inline std::vector<LayerSpec> feedforward_specs(const ModelOptions& o) {
  return {LayerSpec::of(LayerKind::kFlatten),
          LayerSpec::dense(o.ffnn_hidden1), LayerSpec::of(LayerKind::kReLU), LayerSpec::dropout(0.2),
          LayerSpec::dense(o.ffnn_hidden2), LayerSpec::of(LayerKind::kReLU), LayerSpec::dropout(0.2),
          LayerSpec::dense(kNumClasses), LayerSpec::of(LayerKind::kSoftmax)};
}

inline std::vector<LayerSpec> simple_cnn_specs(const ModelOptions& o) {
  const std::size_t p = o.padding;
  return {LayerSpec::conv(capped(32, o), 3, p), LayerSpec::of(LayerKind::kReLU),
          LayerSpec::conv(capped(64, o), 3, p), LayerSpec::of(LayerKind::kReLU),
          LayerSpec::of(LayerKind::kMaxPool2D), LayerSpec::dropout(0.25),
          LayerSpec::of(LayerKind::kFlatten),
          LayerSpec::dense(o.simple_dense), LayerSpec::of(LayerKind::kReLU), LayerSpec::dropout(0.5),
          LayerSpec::dense(kNumClasses), LayerSpec::of(LayerKind::kSoftmax)};
}

inline std::vector<LayerSpec> proposed_cnn_specs(const ModelOptions& o) {
  const std::size_t p = o.padding;
  const auto relu = LayerSpec::of(LayerKind::kReLU);
  const auto pool = LayerSpec::of(LayerKind::kMaxPool2D);
  return {LayerSpec::conv(capped(64, o), 3, p), relu,
          LayerSpec::conv(capped(64, o), 3, p), relu, pool, LayerSpec::dropout(0.25),
          LayerSpec::conv(capped(128, o), 3, p), relu,
          LayerSpec::conv(capped(128, o), 3, p), relu,
          LayerSpec::conv(capped(256, o), 3, p), relu,
          LayerSpec::conv(capped(256, o), 3, p), relu, pool, LayerSpec::dropout(0.25),
          LayerSpec::of(LayerKind::kFlatten),
          LayerSpec::dense(o.proposed_dense, o.l2_penalty), relu, LayerSpec::dropout(0.5),
          LayerSpec::dense(kNumClasses), LayerSpec::of(LayerKind::kSoftmax)};
}

inline std::vector<LayerSpec> architecture_specs(Architecture a, const ModelOptions& o) {
  switch (a) {
    case Architecture::kFeedForward: return feedforward_specs(o);
    case Architecture::kSimpleCnn: return simple_cnn_specs(o);
    case Architecture::kProposedCnn: return proposed_cnn_specs(o);
  }
  throw std::invalid_argument("unknown architecture");
}

template <typename T = float>
Network<T> build_network(Architecture a, const ModelOptions& o = {}) {
  Network<T> net(architecture_specs(a, o), {1, o.input_side, o.input_side});
  net.initialize(o.seed);
  return net;
}

template <typename T = float>
Network<T> build_feedforward(const ModelOptions& o = {}) {
  return build_network<T>(Architecture::kFeedForward, o);
}
template <typename T = float>
Network<T> build_simple_cnn(const ModelOptions& o = {}) {
  return build_network<T>(Architecture::kSimpleCnn, o);
}
template <typename T = float>
Network<T> build_proposed_cnn(const ModelOptions& o = {}) {
  return build_network<T>(Architecture::kProposedCnn, o);
}

struct ShapeTraceRow {
  std::size_t index;
  LayerKind kind;
  Shape output;
  std::size_t parameters;
};

template <typename T>
std::vector<ShapeTraceRow> shape_trace(const Network<T>& net) {
  std::vector<ShapeTraceRow> rows;
  for (std::size_t i = 0; i < net.layers().size(); ++i) {
    const auto& l = net.layers()[i];
    std::size_t n = 0;
    for (const auto& p : l.params) n += p.size();
    rows.push_back({i, l.spec.kind, l.out_shape, n});
  }
  return rows;
}

// ---------------------------------------------------------------------------
// Forward / backward

// Per-thread scratch: layer caches from the last forward pass and gradient
// accumulators shaped like the network parameters.
template <typename T>
struct Workspace {
  std::vector<LayerCache<T>> caches;
  std::vector<std::vector<Tensor<T>>> grads;
  std::optional<std::size_t> corrupt_backward_layer;  // test hook for the gradient checker

  explicit Workspace(const Network<T>& net, bool with_grads = true)
      : caches(net.layers().size()) {
    for (const auto& l : net.layers()) {
      grads.emplace_back();
      if (with_grads)
        for (const auto& p : l.params) grads.back().emplace_back(p.shape());
    }
  }

  void zero_grads() {
    for (auto& g : grads)
      for (auto& t : g) t.fill(T{});
  }
};

inline std::uint64_t layer_dropout_seed(std::uint64_t sample_seed, std::size_t layer) {
  return derive_seed(sample_seed, layer);
}

// Runs every layer including the final softmax; returns class probabilities.
template <typename T>
Tensor<T> forward(const Network<T>& net, Workspace<T>& ws, const Tensor<T>& x, Mode mode,
                  std::uint64_t sample_seed = 0) {
  if (x.shape() != net.input_shape())
    throw ShapeError("network input must be " + shape_str(net.input_shape()) + ", got " +
                     shape_str(x.shape()));
  Tensor<T> a = x;
  for (std::size_t i = 0; i < net.layers().size(); ++i)
    a = layer_forward(net.layers()[i], ws.caches[i], a, mode, layer_dropout_seed(sample_seed, i));
  return a;
}

template <typename T>
Tensor<T> backward_range(const Network<T>& net, Workspace<T>& ws, Tensor<T> grad,
                         std::size_t end_layer) {
  for (std::size_t i = end_layer; i-- > 0;) {
    grad = layer_backward(net.layers()[i], ws.caches[i], grad, ws.grads[i]);
    if (ws.corrupt_backward_layer && *ws.corrupt_backward_layer == i) {
      for (auto& v : grad.data()) v *= T(1.5);
      for (auto& g : ws.grads[i])
        for (auto& v : g.data()) v *= T(1.5);
    }
  }
  return grad;
}

// Backpropagates dL/d(probabilities) through the whole network. Returns dL/dx.
template <typename T>
Tensor<T> backward(const Network<T>& net, Workspace<T>& ws, const Tensor<T>& grad_probs) {
  return backward_range(net, ws, grad_probs, net.layers().size());
}

// Backpropagates dL/d(logits), skipping the softmax (fused cross-entropy path).
template <typename T>
Tensor<T> backward_from_logits(const Network<T>& net, Workspace<T>& ws,
                               const Tensor<T>& grad_logits) {
  return backward_range(net, ws, grad_logits, net.layers().size() - 1);
}

template <typename T>
std::vector<L2Term<T>> l2_terms(const Network<T>& net) {
  std::vector<L2Term<T>> terms;
  for (const auto& l : net.layers())
    if (l.spec.kind == LayerKind::kDense && l.spec.l2 > 0.0) terms.push_back({l.spec.l2, &l.params[0]});
  return terms;
}

// Inference: dropout disabled, pure function of (parameters, image).
template <typename T>
Tensor<T> predict(const Network<T>& net, const Tensor<T>& image) {
  Workspace<T> ws(net, false);
  return forward(net, ws, image, Mode::kInfer);
}

// Lowest index wins ties.
template <typename T>
std::size_t argmax(std::span<T> values) {
  std::size_t best = 0;
  for (std::size_t i = 1; i < values.size(); ++i)
    if (values[i] > values[best]) best = i;
  return best;
}

}  // namespace fer
