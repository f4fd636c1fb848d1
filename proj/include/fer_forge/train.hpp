#pragma once

#include <algorithm>
#include <array>
#include <chrono>
#include <cmath>
#include <cstdint>
#include <cstdlib>
#include <exception>
#include <functional>
#include <iomanip>
#include <numeric>
#include <optional>
#include <ostream>
#include <span>
#include <sstream>
#include <stdexcept>
#include <string>
#include <thread>
#include <vector>

#include "fer_forge/data.hpp"
#include "fer_forge/models.hpp"
#include "fer_forge/optim.hpp"
#include "fer_forge/rng.hpp"

namespace fer {

// ---------------------------------------------------------------------------
// Metrics

inline double accuracy(std::span<const int> predictions, std::span<const int> truths) {
  if (predictions.size() != truths.size())
    throw std::invalid_argument("accuracy: " + std::to_string(predictions.size()) + " predictions vs " +
                                std::to_string(truths.size()) + " labels");
  if (predictions.empty()) throw std::invalid_argument("accuracy of an empty set");
  std::size_t correct = 0;
  for (std::size_t i = 0; i < truths.size(); ++i) correct += predictions[i] == truths[i];
  return static_cast<double>(correct) / static_cast<double>(truths.size());
}

struct ConfusionMatrix {
  std::array<std::array<std::uint64_t, kNumClasses>, kNumClasses> counts{};  // [true][predicted]

  std::uint64_t total() const {
    std::uint64_t n = 0;
    for (const auto& row : counts) n += std::accumulate(row.begin(), row.end(), std::uint64_t{0});
    return n;
  }
  std::uint64_t trace() const {
    std::uint64_t n = 0;
    for (std::size_t i = 0; i < kNumClasses; ++i) n += counts[i][i];
    return n;
  }
  std::uint64_t row_sum(std::size_t r) const {
    return std::accumulate(counts[r].begin(), counts[r].end(), std::uint64_t{0});
  }
  std::array<std::array<double, kNumClasses>, kNumClasses> row_rates() const {
    std::array<std::array<double, kNumClasses>, kNumClasses> rates{};
    for (std::size_t r = 0; r < kNumClasses; ++r) {
      const double n = static_cast<double>(row_sum(r));
      for (std::size_t c = 0; c < kNumClasses; ++c)
        rates[r][c] = n > 0 ? static_cast<double>(counts[r][c]) / n : 0.0;
    }
    return rates;
  }

  void write_csv(std::ostream& os) const {
    os << "true\\predicted";
    for (auto name : kEmotionNames) os << ',' << name;
    os << '\n';
    for (std::size_t r = 0; r < kNumClasses; ++r) {
      os << kEmotionNames[r];
      for (std::size_t c = 0; c < kNumClasses; ++c) os << ',' << counts[r][c];
      os << '\n';
    }
  }

  void write_rates_csv(std::ostream& os) const {
    const auto rates = row_rates();
    os << "true\\predicted";
    for (auto name : kEmotionNames) os << ',' << name;
    os << '\n';
    for (std::size_t r = 0; r < kNumClasses; ++r) {
      os << kEmotionNames[r];
      for (std::size_t c = 0; c < kNumClasses; ++c) os << ',' << std::fixed << std::setprecision(4) << rates[r][c];
      os << std::defaultfloat << '\n';
    }
  }

  void write_table(std::ostream& os) const {
    os << std::setw(10) << "";
    for (auto name : kEmotionNames) os << std::setw(9) << name;
    os << '\n';
    for (std::size_t r = 0; r < kNumClasses; ++r) {
      os << std::setw(10) << kEmotionNames[r];
      for (std::size_t c = 0; c < kNumClasses; ++c) os << std::setw(9) << counts[r][c];
      os << '\n';
    }
  }
};

inline ConfusionMatrix confusion(std::span<const int> predictions, std::span<const int> truths) {
  if (predictions.size() != truths.size()) throw std::invalid_argument("confusion: length mismatch");
  ConfusionMatrix m;
  for (std::size_t i = 0; i < truths.size(); ++i) {
    const auto t = static_cast<std::size_t>(truths[i]);
    const auto p = static_cast<std::size_t>(predictions[i]);
    if (t >= kNumClasses || p >= kNumClasses) throw std::out_of_range("confusion: label outside 0..6");
    ++m.counts[t][p];
  }
  return m;
}

// Position of `truth` in the descending ranking of `probs` (0 = top-1).
// Ties rank the lower class index first.
template <typename T>
std::size_t rank_of(std::span<const T> probs, std::size_t truth) {
  std::size_t rank = 0;
  for (std::size_t c = 0; c < probs.size(); ++c)
    if (probs[c] > probs[truth] || (probs[c] == probs[truth] && c < truth)) ++rank;
  return rank;
}

template <typename T>
double topk_accuracy(std::span<const Tensor<T>> probs, std::span<const int> truths, std::size_t k) {
  if (probs.size() != truths.size()) throw std::invalid_argument("topk_accuracy: length mismatch");
  if (probs.empty()) throw std::invalid_argument("topk_accuracy of an empty set");
  std::size_t hits = 0;
  for (std::size_t i = 0; i < probs.size(); ++i)
    hits += rank_of(probs[i].data(), static_cast<std::size_t>(truths[i])) < k;
  return static_cast<double>(hits) / static_cast<double>(probs.size());
}

// True iff the last `window` epoch-over-epoch changes are all within epsilon.
inline bool early_stop(std::span<const double> history, std::size_t window = 4, double epsilon = 5e-4) {
  if (window < 1 || history.size() < window + 1) return false;
  for (std::size_t i = history.size() - window; i < history.size(); ++i)
    if (std::abs(history[i] - history[i - 1]) > epsilon) return false;
  return true;
}

// ---------------------------------------------------------------------------
// Training

inline constexpr std::size_t kGradientChunks = 4;

inline std::size_t thread_budget(std::size_t requested = 0) {
  std::size_t n = requested;
  if (n == 0) {
    if (const char* env = std::getenv("FER_FORGE_THREADS")) n = std::strtoul(env, nullptr, 10);
  }
  if (n == 0) n = std::max(1u, std::thread::hardware_concurrency());
  return n;
}

enum class Monitor { kTrain, kTest };

struct TrainConfig {
  OptimizerConfig optimizer = OptimizerConfig::defaults(OptimizerKind::kAdam);
  std::size_t batch_size = 128;
  std::size_t max_epochs = 100;
  bool early_stopping = true;
  std::size_t early_stop_window = 4;
  double early_stop_epsilon = 5e-4;
  bool strict_epoch_eval = false;
  Monitor monitor = Monitor::kTrain;
  std::optional<double> target_accuracy;  // stop once the monitored accuracy reaches this
  std::uint64_t seed = 42;
  std::size_t threads = 0;  // 0 = FER_FORGE_THREADS or hardware concurrency

  void validate() const {
    optimizer.validate();
    if (batch_size < 1) throw std::invalid_argument("batch size must be >= 1");
    if (early_stop_window < 1) throw std::invalid_argument("early-stop window must be >= 1");
    if (!(early_stop_epsilon >= 0.0)) throw std::invalid_argument("early-stop epsilon must be >= 0");
  }
};

struct EpochLog {
  std::size_t epoch = 0;  // 1-based
  double loss = 0.0;
  double accuracy = 0.0;  // training accuracy (running or strict)
  double seconds = 0.0;
  double monitored = 0.0;  // the value early stopping watches
};

enum class StopReason { kMaxEpochs, kEarlyStop, kTargetReached };

inline std::string_view stop_reason_name(StopReason r) {
  switch (r) {
    case StopReason::kMaxEpochs: return "max_epochs";
    case StopReason::kEarlyStop: return "early_stop";
    case StopReason::kTargetReached: return "target_reached";
  }
  return "?";
}

struct TrainResult {
  std::vector<EpochLog> logs;
  StopReason reason = StopReason::kMaxEpochs;
  std::uint64_t steps = 0;
};

class TrainingError : public std::runtime_error {
 public:
  TrainingError(std::size_t epoch, std::size_t batch, const std::string& what)
      : std::runtime_error("epoch " + std::to_string(epoch) + ", batch " + std::to_string(batch) + ": " + what),
        epoch_(epoch),
        batch_(batch) {}
  std::size_t epoch() const noexcept { return epoch_; }
  std::size_t batch() const noexcept { return batch_; }

 private:
  std::size_t epoch_, batch_;
};

inline void write_epoch_csv_header(std::ostream& os) { os << "epoch,loss,accuracy,seconds\n"; }

inline void write_epoch_csv_row(std::ostream& os, const EpochLog& log) {
  os << log.epoch << ',' << std::setprecision(8) << log.loss << ',' << log.accuracy << ','
     << std::setprecision(4) << log.seconds << std::defaultfloat << '\n';
}

namespace detail {

// Runs `fn(chunk)` for chunk in [0, chunks) on up to `threads` threads.
template <typename Fn>
void run_chunks(std::size_t chunks, std::size_t threads, Fn&& fn) {
  threads = std::min(threads, chunks);
  if (threads <= 1) {
    for (std::size_t c = 0; c < chunks; ++c) fn(c);
    return;
  }
  std::vector<std::thread> pool;
  std::vector<std::exception_ptr> errors(threads);
  for (std::size_t t = 0; t < threads; ++t)
    pool.emplace_back([&, t] {
      try {
        for (std::size_t c = t; c < chunks; c += threads) fn(c);
      } catch (...) {
        errors[t] = std::current_exception();
      }
    });
  for (auto& th : pool) th.join();
  for (const auto& e : errors)
    if (e) std::rethrow_exception(e);
}

}  // namespace detail

struct Evaluation {
  std::vector<int> predictions;
  std::vector<Tensor<float>> probabilities;
  double accuracy = 0.0;
  double top2 = 0.0;
  ConfusionMatrix confusion;
};

// Feeds every image through the network in inference mode.
inline Evaluation evaluate(const Network<float>& net, const LabeledDataset& data, std::size_t threads = 0) {
  Evaluation ev;
  ev.predictions.resize(data.size());
  ev.probabilities.resize(data.size());
  threads = thread_budget(threads);
  const std::size_t chunks = std::max<std::size_t>(1, std::min(threads, data.size()));
  detail::run_chunks(chunks, threads, [&](std::size_t c) {
    Workspace<float> ws(net, false);
    for (std::size_t i = c; i < data.size(); i += chunks) {
      ev.probabilities[i] = forward(net, ws, data.images[i], Mode::kInfer);
      ev.predictions[i] = static_cast<int>(argmax(ev.probabilities[i].data()));
    }
  });
  if (!data.empty()) {
    ev.accuracy = accuracy(ev.predictions, data.labels);
    ev.top2 = topk_accuracy<float>(ev.probabilities, data.labels, 2);
  }
  ev.confusion = confusion(ev.predictions, data.labels);
  return ev;
}

using EpochCallback = std::function<void(const EpochLog&)>;

// Mini-batch training with per-sample backprop. A batch is cut into a fixed
// number of contiguous chunks; each chunk's gradients are summed in sample
// order and the chunk sums are added in chunk order, so results do not
// depend on the thread count.
inline TrainResult train(Network<float>& net, const LabeledDataset& data, const TrainConfig& cfg,
                         const LabeledDataset* monitor_set = nullptr, const EpochCallback& on_epoch = {}) {
  cfg.validate();
  if (data.empty()) throw std::invalid_argument("training set is empty");
  if (cfg.monitor == Monitor::kTest && (!monitor_set || monitor_set->empty()))
    throw std::invalid_argument("test-accuracy monitoring needs a non-empty test set");

  const std::size_t threads = thread_budget(cfg.threads);
  Optimizer<float> opt(cfg.optimizer);
  std::vector<Workspace<float>> workspaces;
  for (std::size_t c = 0; c < kGradientChunks; ++c) workspaces.emplace_back(net);
  const auto params = net.parameters();
  std::vector<Tensor<float>> grads;
  for (const auto* p : params) grads.emplace_back(p->shape());

  TrainResult result;
  std::vector<double> history;
  for (std::size_t epoch = 1; epoch <= cfg.max_epochs; ++epoch) {
    const auto t0 = std::chrono::steady_clock::now();
    const auto plan = batch_indices(data.size(), cfg.batch_size,
                                    derive_seed(cfg.seed, SeedStream::kShuffle, epoch));
    double loss_sum = 0.0;
    std::size_t correct = 0, position = 0;
    for (std::size_t b = 0; b < plan.size(); ++b) {
      const auto& batch = plan[b];
      std::array<double, kGradientChunks> chunk_loss{};
      std::array<std::size_t, kGradientChunks> chunk_correct{};
      const std::size_t per_chunk = (batch.size() + kGradientChunks - 1) / kGradientChunks;
      const std::size_t base = (epoch - 1) * data.size() + position;
      try {
        detail::run_chunks(kGradientChunks, threads, [&](std::size_t c) {
          auto& ws = workspaces[c];
          ws.zero_grads();
          const std::size_t lo = std::min(batch.size(), c * per_chunk);
          const std::size_t hi = std::min(batch.size(), lo + per_chunk);
          for (std::size_t s = lo; s < hi; ++s) {
            const std::size_t i = batch[s];
            const auto seed = derive_seed(cfg.seed, SeedStream::kDropout, base + s);
            const Tensor<float> probs = forward(net, ws, data.images[i], Mode::kTrain, seed);
            chunk_loss[c] += cross_entropy_loss(probs, data.onehots[i]);
            chunk_correct[c] += static_cast<int>(argmax(probs.data())) == data.labels[i];
            backward_from_logits(net, ws, softmax_cross_entropy_grad(probs, data.onehots[i]));
          }
        });
      } catch (const std::domain_error& e) {
        throw TrainingError(epoch, b + 1, e.what());
      }
      position += batch.size();

      for (auto& g : grads) g.fill(0.0f);
      double batch_loss = 0.0;
      for (std::size_t c = 0; c < kGradientChunks; ++c) {
        batch_loss += chunk_loss[c];
        correct += chunk_correct[c];
        std::size_t gi = 0;
        for (const auto& layer_grads : workspaces[c].grads)
          for (const auto& src : layer_grads) {
            auto dst = grads[gi++].data();
            for (std::size_t k = 0; k < dst.size(); ++k) dst[k] += src[k];
          }
      }
      const float inv = 1.0f / static_cast<float>(batch.size());
      for (auto& g : grads)
        for (float& v : g.data()) v *= inv;
      batch_loss /= static_cast<double>(batch.size());
      std::size_t gi = 0;
      for (const auto& l : net.layers()) {
        if (l.spec.kind == LayerKind::kDense && l.spec.l2 > 0.0) {
          batch_loss += static_cast<double>(l2_penalty(l.spec.l2, l.params[0]));
          add_l2_gradient(l.spec.l2, l.params[0], grads[gi]);
        }
        gi += l.params.size();
      }
      if (!std::isfinite(batch_loss))
        throw TrainingError(epoch, b + 1, "non-finite loss " + std::to_string(batch_loss));
      opt.step(params, grads);
      loss_sum += batch_loss * static_cast<double>(batch.size());
      ++result.steps;
    }

    EpochLog log;
    log.epoch = epoch;
    log.loss = loss_sum / static_cast<double>(data.size());
    log.accuracy = cfg.strict_epoch_eval ? evaluate(net, data, threads).accuracy
                                         : static_cast<double>(correct) / static_cast<double>(data.size());
    log.monitored = cfg.monitor == Monitor::kTest ? evaluate(net, *monitor_set, threads).accuracy : log.accuracy;
    log.seconds = std::chrono::duration<double>(std::chrono::steady_clock::now() - t0).count();
    result.logs.push_back(log);
    history.push_back(log.monitored);
    if (on_epoch) on_epoch(log);

    if (cfg.target_accuracy && log.monitored >= *cfg.target_accuracy) {
      result.reason = StopReason::kTargetReached;
      return result;
    }
    if (cfg.early_stopping && early_stop(history, cfg.early_stop_window, cfg.early_stop_epsilon)) {
      result.reason = StopReason::kEarlyStop;
      return result;
    }
  }
  result.reason = StopReason::kMaxEpochs;
  return result;
}

}  // namespace fer
