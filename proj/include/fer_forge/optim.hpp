#pragma once

#include <cmath>
#include <cstdint>
#include <optional>
#include <stdexcept>
#include <string>
#include <string_view>
#include <vector>

#include "fer_forge/tensor.hpp"

namespace fer {

enum class OptimizerKind { kSgd, kRmsProp, kAdam };

inline std::string_view optimizer_name(OptimizerKind kind) {
  switch (kind) {
    case OptimizerKind::kSgd: return "sgd";
    case OptimizerKind::kRmsProp: return "rmsprop";
    case OptimizerKind::kAdam: return "adam";
  }
  return "?";
}

inline std::optional<OptimizerKind> parse_optimizer(std::string_view name) {
  if (name == "sgd" || name == "SGD") return OptimizerKind::kSgd;
  if (name == "rmsprop" || name == "RMSProp") return OptimizerKind::kRmsProp;
  if (name == "adam" || name == "Adam") return OptimizerKind::kAdam;
  return std::nullopt;
}

struct OptimizerConfig {
  OptimizerKind kind = OptimizerKind::kAdam;
  double learning_rate = 0.001;
  double decay = 0.0;  // inverse-time: lr_t = lr / (1 + decay * t)
  double momentum = 0.0;
  double rho = 0.9;
  double beta1 = 0.9;
  double beta2 = 0.999;
  double epsilon = 1e-7;

  // Stock settings per optimizer; only the learning rate differs.
  static OptimizerConfig defaults(OptimizerKind kind) {
    OptimizerConfig c;
    c.kind = kind;
    c.learning_rate = kind == OptimizerKind::kSgd ? 0.01 : 0.001;
    return c;
  }

  void validate() const {
    // lr == 0 is accepted so that frozen-parameter runs are expressible.
    if (!(learning_rate >= 0.0)) throw std::invalid_argument("learning rate must be >= 0");
    if (!(decay >= 0.0)) throw std::invalid_argument("decay must be >= 0");
    if (!(momentum >= 0.0 && momentum < 1.0)) throw std::invalid_argument("momentum must be in [0,1)");
    if (!(rho >= 0.0 && rho < 1.0)) throw std::invalid_argument("rho must be in [0,1)");
    if (!(beta1 >= 0.0 && beta1 < 1.0)) throw std::invalid_argument("beta1 must be in [0,1)");
    if (!(beta2 >= 0.0 && beta2 < 1.0)) throw std::invalid_argument("beta2 must be in [0,1)");
    if (!(epsilon > 0.0)) throw std::invalid_argument("epsilon must be > 0");
  }

  // t counts the updates already applied.
  double learning_rate_at(std::uint64_t t) const {
    return learning_rate / (1.0 + decay * static_cast<double>(t));
  }
};

template <typename T>
struct OptimizerState {
  std::uint64_t step_count = 0;
  std::vector<Tensor<T>> first;   // SGD velocity or Adam m
  std::vector<Tensor<T>> second;  // RMSProp / Adam v

  bool bound() const { return !first.empty() || !second.empty(); }
};

// One update of a single parameter tensor. `t` is the number of updates
// applied before this one; the caller advances the shared step counter.
template <typename T>
void sgd_step(Tensor<T>& w, const Tensor<T>& grad, const OptimizerConfig& cfg, std::uint64_t t,
              Tensor<T>& velocity) {
  const double lr = cfg.learning_rate_at(t);
  for (std::size_t i = 0; i < w.size(); ++i) {
    if (cfg.momentum == 0.0) {
      w[i] -= static_cast<T>(lr * grad[i]);
    } else {
      velocity[i] = static_cast<T>(cfg.momentum * velocity[i] - lr * grad[i]);
      w[i] += velocity[i];
    }
  }
}

template <typename T>
void rmsprop_step(Tensor<T>& w, const Tensor<T>& grad, const OptimizerConfig& cfg,
                  std::uint64_t t, Tensor<T>& mean_square) {
  const double lr = cfg.learning_rate_at(t);
  for (std::size_t i = 0; i < w.size(); ++i) {
    const double g = grad[i];
    const double v = cfg.rho * mean_square[i] + (1.0 - cfg.rho) * g * g;
    mean_square[i] = static_cast<T>(v);
    w[i] -= static_cast<T>(lr * g / (std::sqrt(v) + cfg.epsilon));
  }
}

template <typename T>
void adam_step(Tensor<T>& w, const Tensor<T>& grad, const OptimizerConfig& cfg, std::uint64_t t,
               Tensor<T>& m, Tensor<T>& v) {
  const double lr = cfg.learning_rate_at(t);
  const double step = static_cast<double>(t + 1);
  const double c1 = 1.0 - std::pow(cfg.beta1, step);
  const double c2 = 1.0 - std::pow(cfg.beta2, step);
  for (std::size_t i = 0; i < w.size(); ++i) {
    const double g = grad[i];
    const double mi = cfg.beta1 * m[i] + (1.0 - cfg.beta1) * g;
    const double vi = cfg.beta2 * v[i] + (1.0 - cfg.beta2) * g * g;
    m[i] = static_cast<T>(mi);
    v[i] = static_cast<T>(vi);
    w[i] -= static_cast<T>(lr * (mi / c1) / (std::sqrt(vi / c2) + cfg.epsilon));
  }
}

// Binds moment buffers to a fixed list of parameter tensors and applies one
// update to all of them per step().
template <typename T>
class Optimizer {
 public:
  explicit Optimizer(OptimizerConfig cfg) : cfg_(cfg) { cfg_.validate(); }

  const OptimizerConfig& config() const { return cfg_; }
  const OptimizerState<T>& state() const { return state_; }
  double current_learning_rate() const { return cfg_.learning_rate_at(state_.step_count); }

  void step(const std::vector<Tensor<T>*>& params, const std::vector<Tensor<T>>& grads) {
    if (params.size() != grads.size())
      throw std::invalid_argument("optimizer: parameter and gradient counts differ");
    if (!state_.bound()) bind(params);
    if (params.size() != shapes_.size())
      throw std::invalid_argument("optimizer: parameter list changed after binding");
    for (std::size_t i = 0; i < params.size(); ++i) {
      if (params[i]->shape() != shapes_[i] || grads[i].shape() != shapes_[i])
        throw ShapeError("optimizer: shape of parameter " + std::to_string(i) + " changed from " +
                         shape_str(shapes_[i]));
      const std::uint64_t t = state_.step_count;
      switch (cfg_.kind) {
        case OptimizerKind::kSgd: sgd_step(*params[i], grads[i], cfg_, t, state_.first[i]); break;
        case OptimizerKind::kRmsProp:
          rmsprop_step(*params[i], grads[i], cfg_, t, state_.second[i]);
          break;
        case OptimizerKind::kAdam:
          adam_step(*params[i], grads[i], cfg_, t, state_.first[i], state_.second[i]);
          break;
      }
    }
    ++state_.step_count;
  }

 private:
  void bind(const std::vector<Tensor<T>*>& params) {
    shapes_.clear();
    for (const auto* p : params) {
      shapes_.push_back(p->shape());
      state_.first.emplace_back(p->shape());
      state_.second.emplace_back(p->shape());
    }
  }

  OptimizerConfig cfg_;
  OptimizerState<T> state_;
  std::vector<Shape> shapes_;
};

}  // namespace fer
