#pragma once

#include <algorithm>
#include <cmath>
#include <cstdint>
#include <optional>
#include <ostream>
#include <string>
#include <vector>

#include "fer_forge/layers.hpp"
#include "fer_forge/models.hpp"
#include "fer_forge/rng.hpp"
#include "fer_forge/tensor.hpp"

namespace fer {

// Central finite-difference verification of the hand-written backward passes,
// run in f64 on small instances.

inline constexpr double kGradcheckStep = 1e-6;
inline constexpr double kGradcheckTolerance = 1e-5;
inline constexpr double kGradcheckFloor = 1e-4;

inline double relative_error(double analytic, double numeric, double floor = kGradcheckFloor) {
  return std::abs(analytic - numeric) / std::max({std::abs(analytic), std::abs(numeric), floor});
}

struct GradcheckOptions {
  double step = kGradcheckStep;
  double tolerance = kGradcheckTolerance;
  std::uint64_t seed = 42;
  std::optional<std::size_t> corrupt_layer;  // scales one layer's backward by 1.5
};

struct GradcheckEntry {
  std::string scope;  // "layer" or "network"
  std::size_t layer = 0;
  LayerKind kind = LayerKind::kFlatten;
  std::string target;  // "input" or "param <k>"
  std::size_t index = 0;
  double analytic = 0.0;
  double numeric = 0.0;
  double error = 0.0;
};

struct GradcheckReport {
  std::size_t checked = 0;
  double max_error = 0.0;
  GradcheckEntry worst;
  std::vector<std::pair<std::size_t, double>> layer_max;  // (layer, max error) over per-layer checks

  bool passed(double tolerance = kGradcheckTolerance) const { return max_error < tolerance; }

  void record(const GradcheckEntry& e) {
    ++checked;
    if (checked == 1 || e.error > max_error) {
      max_error = e.error;
      worst = e;
    }
  }

  void merge(const GradcheckReport& other) {
    if (other.checked == 0) return;
    const std::size_t before = checked;
    checked += other.checked;
    if (before == 0 || other.max_error > max_error) {
      max_error = other.max_error;
      worst = other.worst;
    }
    layer_max.insert(layer_max.end(), other.layer_max.begin(), other.layer_max.end());
  }
};

inline void write_gradcheck_report(std::ostream& os, const GradcheckReport& r, double tolerance = kGradcheckTolerance) {
  for (const auto& [layer, err] : r.layer_max) os << "layer " << layer << " max_rel_error " << err << '\n';
  os << "checked " << r.checked << " partial derivatives\n";
  os << "max_rel_error " << r.max_error << " at " << r.worst.scope << " layer " << r.worst.layer << " ("
     << layer_kind_name(r.worst.kind) << ") " << r.worst.target << " index " << r.worst.index
     << " analytic " << r.worst.analytic << " numeric " << r.worst.numeric << '\n';
  os << (r.passed(tolerance) ? "PASS" : "FAIL") << " (tolerance " << tolerance << ")\n";
}

namespace detail {

// Uniform in +-[0.1, 1]: keeps ReLU inputs away from the kink at 0.
inline Tensor<double> gradcheck_tensor(const Shape& shape, std::uint64_t seed) {
  Tensor<double> t(shape);
  for (std::size_t i = 0; i < t.size(); ++i) {
    const double u = counter_uniform(seed, i);
    const double mag = 0.1 + 0.9 * counter_uniform(seed, i + 0x9E3779B9ULL);
    t[i] = u < 0.5 ? -mag : mag;
  }
  return t;
}

inline double weighted_sum(const Tensor<double>& y, const Tensor<double>& r) {
  double s = 0.0;
  for (std::size_t i = 0; i < y.size(); ++i) s += y[i] * r[i];
  return s;
}

template <typename Fn>
double central_difference(double& slot, double h, Fn&& loss) {
  const double saved = slot;
  slot = saved + h;
  const double plus = loss();
  slot = saved - h;
  const double minus = loss();
  slot = saved;
  return (plus - minus) / (2.0 * h);
}

}  // namespace detail

// Checks one bound layer on its own: L = sum(r * layer(x)) with random x and
// random upstream r. Dropout runs in train mode with a fixed mask seed.
inline GradcheckReport gradcheck_layer(const Layer<double>& bound, std::size_t layer_index,
                                       const GradcheckOptions& opt = {}) {
  Layer<double> layer = bound;
  const std::uint64_t base = derive_seed(opt.seed, SeedStream::kGradcheck, layer_index);
  for (std::size_t p = 0; p < layer.params.size(); ++p)
    layer.params[p] = detail::gradcheck_tensor(layer.params[p].shape(), derive_seed(base, 10 + p));
  Tensor<double> x = detail::gradcheck_tensor(layer.in_shape, derive_seed(base, 1));
  const Tensor<double> r = detail::gradcheck_tensor(layer.out_shape, derive_seed(base, 2));
  const std::uint64_t mask_seed = derive_seed(base, 3);

  LayerCache<double> cache;
  auto loss = [&] {
    LayerCache<double> c;
    return detail::weighted_sum(layer_forward(layer, c, x, Mode::kTrain, mask_seed), r);
  };
  layer_forward(layer, cache, x, Mode::kTrain, mask_seed);
  std::vector<Tensor<double>> pgrads;
  for (const auto& p : layer.params) pgrads.emplace_back(p.shape());
  Tensor<double> gx = layer_backward(layer, cache, r, pgrads);
  if (opt.corrupt_layer && *opt.corrupt_layer == layer_index) {
    for (auto& v : gx.data()) v *= 1.5;
    for (auto& g : pgrads)
      for (auto& v : g.data()) v *= 1.5;
  }

  GradcheckReport report;
  auto check = [&](Tensor<double>& values, const Tensor<double>& analytic, const std::string& target) {
    for (std::size_t i = 0; i < values.size(); ++i) {
      const double num = detail::central_difference(values[i], opt.step, loss);
      report.record({"layer", layer_index, layer.spec.kind, target, i, analytic[i], num,
                     relative_error(analytic[i], num)});
    }
  };
  check(x, gx, "input");
  for (std::size_t p = 0; p < layer.params.size(); ++p) check(layer.params[p], pgrads[p], "param " + std::to_string(p));
  report.layer_max.emplace_back(layer_index, report.max_error);
  return report;
}

// End-to-end check of cross-entropy + L2 through the whole network against
// every parameter and the input.
inline GradcheckReport gradcheck_network(const Network<double>& source, const GradcheckOptions& opt = {}) {
  Network<double> net = source;
  const std::uint64_t base = derive_seed(opt.seed, SeedStream::kGradcheck, 0xFFFF);
  Tensor<double> x = detail::gradcheck_tensor(net.input_shape(), derive_seed(base, 1));
  for (auto& v : x.data()) v = 0.5 + 0.5 * v;
  const int label = static_cast<int>(derive_seed(base, 2) % kNumClasses);
  Tensor<double> onehot({kNumClasses});
  onehot[static_cast<std::size_t>(label)] = 1.0;
  const std::uint64_t sample_seed = derive_seed(base, 3);

  auto loss = [&] {
    Workspace<double> ws(net, false);
    const auto probs = forward(net, ws, x, Mode::kTrain, sample_seed);
    return cross_entropy_loss(probs, onehot, l2_terms(net));
  };

  Workspace<double> ws(net);
  if (opt.corrupt_layer) ws.corrupt_backward_layer = opt.corrupt_layer;
  const auto probs = forward(net, ws, x, Mode::kTrain, sample_seed);
  Tensor<double> gx = backward_from_logits(net, ws, softmax_cross_entropy_grad(probs, onehot));
  for (std::size_t i = 0; i < net.layers().size(); ++i) {
    const auto& l = net.layers()[i];
    if (l.spec.kind == LayerKind::kDense && l.spec.l2 > 0.0) add_l2_gradient(l.spec.l2, l.params[0], ws.grads[i][0]);
  }

  GradcheckReport report;
  auto check = [&](Tensor<double>& values, const Tensor<double>& analytic, std::size_t layer, LayerKind kind,
                   const std::string& target) {
    for (std::size_t i = 0; i < values.size(); ++i) {
      const double num = detail::central_difference(values[i], opt.step, loss);
      report.record({"network", layer, kind, target, i, analytic[i], num, relative_error(analytic[i], num)});
    }
  };
  check(x, gx, 0, net.layers().front().spec.kind, "input");
  for (std::size_t i = 0; i < net.layers().size(); ++i) {
    auto& l = net.layers()[i];
    for (std::size_t p = 0; p < l.params.size(); ++p) check(l.params[p], ws.grads[i][p], i, l.spec.kind, "param " + std::to_string(p));
  }
  return report;
}

// Toy-size variant of an architecture: 12x12 input, same padding, at most 8
// channels and 16-unit dense layers.
inline ModelOptions gradcheck_model_options(std::uint64_t seed = 42) {
  ModelOptions o;
  o.input_side = 12;
  o.padding = 1;
  o.max_channels = 8;
  o.ffnn_hidden1 = 16;
  o.ffnn_hidden2 = 16;
  o.simple_dense = 16;
  o.proposed_dense = 16;
  o.seed = seed;
  return o;
}

inline GradcheckReport gradcheck_architecture(Architecture arch, const GradcheckOptions& opt = {}) {
  const Network<double> net = build_network<double>(arch, gradcheck_model_options(opt.seed));
  GradcheckReport report;
  for (std::size_t i = 0; i < net.layers().size(); ++i) report.merge(gradcheck_layer(net.layers()[i], i, opt));
  report.merge(gradcheck_network(net, opt));
  return report;
}

}  // namespace fer
