// One PASS/FAIL/SKIP line per acceptance criterion. Exit status is non-zero
// when any criterion fails.

#include <chrono>
#include <cmath>
#include <cstdlib>
#include <cstring>
#include <filesystem>
#include <fstream>
#include <functional>
#include <iomanip>
#include <iostream>
#include <random>
#include <sstream>
#include <string>
#include <vector>

#include "fer_forge/fer_forge.hpp"

using namespace fer;
namespace fs = std::filesystem;

namespace {

// Pinned limits.
constexpr double kGradcheckLimitSeconds = 60.0;
constexpr double kMemorizeTarget = 0.90;
constexpr std::size_t kMemorizeEpochs = 200;
constexpr std::size_t kMemorizeImages = 32;
constexpr std::size_t kMemorizeBatch = 8;
constexpr double kMemorizeLimitSeconds = 600.0;
constexpr double kDatasetLimitSeconds = 30.0;
constexpr double kCnnAccuracyLow = 0.55;
constexpr double kCnnAccuracyHigh = 0.63;
constexpr double kTreeAccuracyTarget = 0.3084;
constexpr double kTreeAccuracyBand = 0.05;
constexpr double kOracleF32Tolerance = 1e-5;
constexpr std::size_t kOracleInstances = 100;
constexpr double kOracleLimitSeconds = 60.0;
constexpr std::size_t kPersistenceInputs = 100;
constexpr std::size_t kMetricTrials = 200;

enum class Status { kPass, kFail, kSkip };

struct Outcome {
  Status status = Status::kFail;
  std::string detail;
};

Outcome pass(std::string d) { return {Status::kPass, std::move(d)}; }
Outcome fail(std::string d) { return {Status::kFail, std::move(d)}; }
Outcome skip(std::string d) { return {Status::kSkip, std::move(d)}; }
Outcome verdict(bool ok, std::string d) { return {ok ? Status::kPass : Status::kFail, std::move(d)}; }

double seconds_since(std::chrono::steady_clock::time_point t0) {
  return std::chrono::duration<double>(std::chrono::steady_clock::now() - t0).count();
}

std::string fmt(double v, int precision = 4) {
  std::ostringstream os;
  os << std::setprecision(precision) << v;
  return os.str();
}

const char* env(const char* name) {
  const char* v = std::getenv(name);
  return v && *v ? v : nullptr;
}

// ---------------------------------------------------------------------------

Outcome gradient_integrity() {
  const auto t0 = std::chrono::steady_clock::now();
  std::string detail;
  bool ok = true;
  double worst = 0.0;
  for (auto arch : {Architecture::kFeedForward, Architecture::kSimpleCnn, Architecture::kProposedCnn}) {
    const auto r = gradcheck_architecture(arch);
    ok = ok && r.passed(kGradcheckTolerance);
    worst = std::max(worst, r.max_error);
    detail += std::string(architecture_name(arch)) + " max_rel_error " + fmt(r.max_error, 3) + " over " +
              std::to_string(r.checked) + "; ";
  }
  const double secs = seconds_since(t0);
  ok = ok && secs < kGradcheckLimitSeconds;
  return verdict(ok, detail + "tolerance " + fmt(kGradcheckTolerance) + ", " + fmt(secs, 3) + " s (limit " +
                         fmt(kGradcheckLimitSeconds) + " s)");
}

LabeledDataset memorization_subset(std::string& source) {
  if (const char* path = env("FER_FORGE_DATA")) {
    const auto records = load_fer_csv(path);
    std::vector<FerRecord> picked;
    for (const auto& r : records)
      if (r.usage != Usage::kPublicTest && r.usage != Usage::kPrivateTest && picked.size() < kMemorizeImages)
        picked.push_back(r);
    source = "FER-2013 training rows";
    return make_dataset(picked);
  }
  source = "synthetic stand-in images (FER_FORGE_DATA unset)";
  return make_dataset(synthetic_records(kMemorizeImages, 42));
}

Outcome memorization() {
  const auto t0 = std::chrono::steady_clock::now();
  std::string source;
  const auto data = memorization_subset(source);
  auto net = build_proposed_cnn();
  TrainConfig cfg;
  cfg.optimizer = OptimizerConfig::defaults(OptimizerKind::kAdam);
  cfg.optimizer.learning_rate = 1e-4;
  cfg.seed = 42;
  cfg.batch_size = kMemorizeBatch;
  cfg.max_epochs = kMemorizeEpochs;
  cfg.early_stopping = false;
  cfg.strict_epoch_eval = true;
  cfg.target_accuracy = kMemorizeTarget;
  const auto r = train(net, data, cfg);
  const double secs = seconds_since(t0);
  const double acc = r.logs.back().accuracy;
  const bool ok = acc >= kMemorizeTarget && secs < kMemorizeLimitSeconds;
  return verdict(ok, "training accuracy " + fmt(acc) + " after " + std::to_string(r.logs.size()) + " epochs on " +
                         std::to_string(data.size()) + " " + source + ", " + fmt(secs, 3) + " s (limit " +
                         fmt(kMemorizeLimitSeconds) + " s)");
}

Outcome shape_trace_check() {
  const auto net = build_proposed_cnn();
  std::vector<std::size_t> spatial, params;
  std::size_t flat = 0;
  for (const auto& row : shape_trace(net)) {
    if (row.kind == LayerKind::kConv2D || row.kind == LayerKind::kMaxPool2D) spatial.push_back(row.output[1]);
    if (row.kind == LayerKind::kFlatten) flat = row.output[0];
    if (row.parameters) params.push_back(row.parameters);
  }
  auto conv = [](std::size_t cin, std::size_t cout) { return 9 * cin * cout + cout; };
  auto dense = [](std::size_t in, std::size_t out) { return in * out + out; };
  const std::vector<std::size_t> want_spatial{46, 44, 22, 20, 18, 16, 14, 7};
  const std::vector<std::size_t> want_params{conv(1, 64),    conv(64, 64),   conv(64, 128),
                                             conv(128, 128), conv(128, 256), conv(256, 256),
                                             dense(7 * 7 * 256, 512), dense(512, 7)};
  std::size_t total = 0;
  for (auto p : want_params) total += p;
  const bool ok = spatial == want_spatial && flat == 12'544 && params == want_params && net.parameter_count() == total;
  return verdict(ok, "spatial 46,44,22,20,18,16,14,7 " + std::string(spatial == want_spatial ? "ok" : "MISMATCH") +
                         ", flatten " + std::to_string(flat) + ", parameters " + std::to_string(net.parameter_count()) +
                         " (closed form " + std::to_string(total) + ")");
}

struct DatasetFacts {
  std::size_t records = 0, train = 0, test = 0, disgust = 0;
  double seconds = 0.0;
};

DatasetFacts parse_facts(const std::string& path) {
  const auto t0 = std::chrono::steady_clock::now();
  const auto records = load_fer_csv(path);
  const auto split = split_dataset(records);
  DatasetFacts f;
  f.records = records.size();
  f.train = split.train.size();
  f.test = split.test.size();
  f.disgust = class_histogram(records)[1];
  f.seconds = seconds_since(t0);
  return f;
}

bool facts_match(const DatasetFacts& f) {
  return f.records == 35'887 && f.train == 28'709 && f.test == 7'178 && f.disgust == 547 &&
         f.seconds < kDatasetLimitSeconds;
}

std::string describe(const DatasetFacts& f) {
  return std::to_string(f.records) + " records, split " + std::to_string(f.train) + "/" + std::to_string(f.test) +
         ", disgust " + std::to_string(f.disgust) + ", " + fmt(f.seconds, 3) + " s";
}

Outcome dataset_contract() {
  if (const char* path = env("FER_FORGE_DATA")) {
    const auto f = parse_facts(path);
    return verdict(facts_match(f), describe(f) + " (limit " + fmt(kDatasetLimitSeconds) + " s)");
  }
  // No genuine file: exercise the same path on a generated file with the
  // published composition so parser scale and timing are still observed.
  const auto tmp = fs::temp_directory_path() / "fer_forge_acceptance_synthetic.csv";
  {
    std::ofstream os(tmp);
    write_synthetic_fer_csv(os, kFer2013Composition, 42);
  }
  const auto f = parse_facts(tmp.string());
  fs::remove(tmp);
  return skip("FER_FORGE_DATA unset, genuine CSV unavailable; synthetic stand-in with the same composition: " +
              describe(f) + (facts_match(f) ? " (matches)" : " (MISMATCH)"));
}

Outcome full_reproduction() {
  const char* path = env("FER_FORGE_DATA");
  if (!env("FER_FORGE_FULL") || !path) return skip("multi-hour run; set FER_FORGE_FULL=1 and FER_FORGE_DATA to enable");
  const auto t0 = std::chrono::steady_clock::now();
  const auto split = split_dataset(load_fer_csv(path));
  auto net = build_proposed_cnn();
  TrainConfig cfg;
  cfg.optimizer = OptimizerConfig::defaults(OptimizerKind::kAdam);
  cfg.optimizer.learning_rate = 1e-4;
  cfg.optimizer.decay = 1e-6;
  cfg.batch_size = 128;
  cfg.max_epochs = 20;
  cfg.seed = 42;
  train(net, split.train, cfg, &split.test, [](const EpochLog& log) {
    std::clog << "  epoch " << log.epoch << " loss " << log.loss << " accuracy " << log.accuracy << '\n';
  });
  const double cnn = evaluate(net, split.test).accuracy;
  const auto tree = fit_tree(FeatureMatrix::from_dataset(split.train), split.train.labels);
  std::vector<int> preds;
  for (const auto& img : split.test.images) preds.push_back(predict_tree(*tree, img));
  const double tree_acc = accuracy(preds, split.test.labels);
  const bool cnn_ok = cnn >= kCnnAccuracyLow && cnn <= kCnnAccuracyHigh;
  const bool tree_ok = std::abs(tree_acc - kTreeAccuracyTarget) <= kTreeAccuracyBand;
  return verdict(cnn_ok && tree_ok, "proposed CNN test accuracy " + fmt(cnn) + " (band [" + fmt(kCnnAccuracyLow) +
                                        ", " + fmt(kCnnAccuracyHigh) + "]), tree " + fmt(tree_acc) + " (target " +
                                        fmt(kTreeAccuracyTarget) + " +- " + fmt(kTreeAccuracyBand) + "), " +
                                        fmt(seconds_since(t0), 5) + " s");
}

// Triple-loop convolution reference.
Tensor<float> reference_conv(const Tensor<float>& x, const Tensor<float>& k, const Tensor<float>& b) {
  const std::size_t ci = x.dim(0), h = x.dim(1), w = x.dim(2), co = k.dim(0);
  const std::size_t oh = h - 2, ow = w - 2;
  Tensor<float> y({co, oh, ow});
  for (std::size_t o = 0; o < co; ++o)
    for (std::size_t i = 0; i < oh; ++i)
      for (std::size_t j = 0; j < ow; ++j) {
        double acc = b[o];
        for (std::size_t c = 0; c < ci; ++c)
          for (std::size_t a = 0; a < 3; ++a)
            for (std::size_t d = 0; d < 3; ++d) acc += double{x.at(c, i + a, j + d)} * k[((o * ci + c) * 3 + a) * 3 + d];
        y.at(o, i, j) = static_cast<float>(acc);
      }
  return y;
}

Outcome oracle_equivalence() {
  const auto t0 = std::chrono::steady_clock::now();
  std::mt19937_64 rng(2024);
  std::uniform_real_distribution<float> u(-1.0f, 1.0f);
  auto fill = [&](Tensor<float>& t) {
    for (auto& v : t.data()) v = u(rng);
  };
  double conv_worst = 0.0;
  std::size_t pool_bad = 0, rect_bad = 0;
  for (std::size_t n = 0; n < kOracleInstances; ++n) {
    const std::size_t ci = 1 + rng() % 4, co = 1 + rng() % 6, h = 3 + rng() % 14, w = 3 + rng() % 14;
    Tensor<float> x({ci, h, w}), k({co, ci, 3, 3}), b({co});
    fill(x);
    fill(k);
    fill(b);
    const auto fast = conv2d_forward(x, k, b, {});
    const auto ref = reference_conv(x, k, b);
    for (std::size_t i = 0; i < ref.size(); ++i)
      conv_worst = std::max(conv_worst, std::abs(double{fast[i]} - ref[i]) / std::max(1.0, std::abs(double{ref[i]})));

    const std::size_t pc = 1 + rng() % 4, ph = 2 + rng() % 15, pw = 2 + rng() % 15;
    Tensor<float> p({pc, ph, pw});
    fill(p);
    const auto pooled = maxpool_forward(p).output;
    for (std::size_t c = 0; c < pc; ++c)
      for (std::size_t y = 0; y < ph / 2; ++y)
        for (std::size_t xx = 0; xx < pw / 2; ++xx) {
          float m = p.at(c, 2 * y, 2 * xx);
          for (std::size_t dy = 0; dy < 2; ++dy)
            for (std::size_t dx = 0; dx < 2; ++dx) m = std::max(m, p.at(c, 2 * y + dy, 2 * xx + dx));
          pool_bad += pooled.at(c, y, xx) != m;
        }

    GrayImage g(1 + rng() % 40, 1 + rng() % 40);
    for (auto& v : g.pixels) v = static_cast<std::uint8_t>(rng() % 256);
    const IntegralImage ii(g);
    const std::size_t rx = rng() % g.width, ry = rng() % g.height;
    const std::size_t rw = 1 + rng() % (g.width - rx), rh = 1 + rng() % (g.height - ry);
    std::int64_t sum = 0;
    for (std::size_t yy = ry; yy < ry + rh; ++yy)
      for (std::size_t xx = rx; xx < rx + rw; ++xx) sum += g.at(xx, yy);
    rect_bad += ii.rect_sum(rx, ry, rw, rh) != sum;
  }
  const double secs = seconds_since(t0);
  const bool ok = conv_worst < kOracleF32Tolerance && pool_bad == 0 && rect_bad == 0 && secs < kOracleLimitSeconds;
  return verdict(ok, std::to_string(kOracleInstances) + " instances each: conv max error " + fmt(conv_worst, 3) +
                         " (tolerance " + fmt(kOracleF32Tolerance) + "), maxpool mismatches " + std::to_string(pool_bad) +
                         ", rect-sum mismatches " + std::to_string(rect_bad) + ", " + fmt(secs, 3) + " s");
}

Outcome early_stop_semantics() {
  constexpr std::size_t kWindow = 4;
  bool ok = true;
  const std::vector<double> constant(kWindow + 1, 0.3);
  ok = ok && early_stop(constant, kWindow, 0.0);
  ok = ok && !early_stop(std::span(constant).first(kWindow), kWindow, 0.0);
  for (std::size_t i = 1; i <= kWindow; ++i) {
    auto moved = constant;
    moved[moved.size() - i] += 1e-9;
    ok = ok && !early_stop(moved, kWindow, 0.0);
  }
  // Frozen parameters give a constant history; training must stop at W+1.
  const auto data = make_dataset(synthetic_records(7, 3));
  ModelOptions small;
  small.ffnn_hidden1 = 16;
  small.ffnn_hidden2 = 16;
  auto net = build_feedforward(small);
  TrainConfig cfg;
  cfg.optimizer.learning_rate = 0.0;
  cfg.batch_size = 7;
  cfg.max_epochs = 50;
  cfg.early_stop_window = kWindow;
  cfg.early_stop_epsilon = 0.0;
  cfg.strict_epoch_eval = true;
  const auto r = train(net, data, cfg);
  ok = ok && r.reason == StopReason::kEarlyStop && r.logs.size() == kWindow + 1;
  return verdict(ok, "constant history stops after " + std::to_string(r.logs.size()) + " epochs (W=" +
                         std::to_string(kWindow) + ", epsilon 0); perturbed windows suppress the stop");
}

Outcome persistence() {
  std::size_t mismatches = 0, compared = 0;
  const auto dir = fs::temp_directory_path();
  for (auto arch : {Architecture::kFeedForward, Architecture::kSimpleCnn, Architecture::kProposedCnn}) {
    const auto net = build_network<float>(arch);
    const auto path = dir / ("fer_forge_acceptance_" + std::string(architecture_name(arch)) + ".femo");
    save_model(net, path);
    const auto loaded = load_model(path);
    fs::remove(path);
    std::mt19937_64 rng(static_cast<std::uint64_t>(arch) + 100);
    std::uniform_real_distribution<float> u(0.0f, 1.0f);
    for (std::size_t n = 0; n < kPersistenceInputs; ++n) {
      Tensor<float> x({1, kImageSide, kImageSide});
      for (auto& v : x.data()) v = u(rng);
      const auto a = predict(net, x), b = predict(loaded, x);
      mismatches += std::memcmp(a.data().data(), b.data().data(), a.size() * sizeof(float)) != 0;
      ++compared;
    }
  }
  return verdict(mismatches == 0, std::to_string(compared) + " predictions over 3 architectures, " +
                                      std::to_string(mismatches) + " differ bitwise");
}

Outcome detection_pipeline() {
  CascadeModel m;
  HaarStump stump;
  stump.rects = {{0, 0, 24, 12, 1.0}, {0, 12, 24, 12, -1.0}};
  stump.threshold = -0.1;
  stump.left_value = 1.0;
  stump.right_value = 0.0;
  m.stages.push_back({0.5, {stump}});
  auto halves = [](std::uint8_t top, std::uint8_t bottom) {
    GrayImage g(24, 24);
    for (std::size_t y = 0; y < 24; ++y)
      for (std::size_t x = 0; x < 24; ++x) g.at(x, y) = y < 12 ? top : bottom;
    return g;
  };
  const bool accepts = eval_window(m, IntegralImage(halves(20, 220)), 0, 0, 1.0);
  const bool rejects = !eval_window(m, IntegralImage(halves(220, 20)), 0, 0, 1.0);

  CascadeModel chain = m;
  chain.stages.insert(chain.stages.begin(), CascadeStage{std::numeric_limits<double>::infinity(), {stump}});
  chain.stages.push_back(m.stages[0]);
  EvalStats stats;
  const bool stopped = !eval_window(chain, IntegralImage(halves(20, 220)), 0, 0, 1.0, &stats);
  const bool short_circuit = stopped && stats.stages_evaluated == 1 && stats.stumps_evaluated == 1;

  const auto blank = detect(m, GrayImage(96, 96, 128), {.min_neighbors = 1});
  const bool ok = accepts && rejects && short_circuit && blank.empty();
  return verdict(ok, std::string("dark-over-light ") + (accepts ? "accepted" : "REJECTED") + ", inverse " +
                         (rejects ? "rejected" : "ACCEPTED") + ", stages evaluated after a rejecting stage " +
                         std::to_string(stats.stages_evaluated) + " of 3, blank-image detections " +
                         std::to_string(blank.size()));
}

Outcome metric_identities() {
  std::mt19937_64 rng(7);
  std::uniform_real_distribution<float> u(-3.0f, 3.0f);
  std::size_t violations = 0;
  for (std::size_t trial = 0; trial < kMetricTrials; ++trial) {
    const std::size_t n = 1 + rng() % 60;
    std::vector<Tensor<float>> probs;
    std::vector<int> truths, preds;
    for (std::size_t i = 0; i < n; ++i) {
      Tensor<float> z({kNumClasses});
      for (auto& v : z.data()) v = u(rng);
      probs.push_back(softmax_forward(z));
      truths.push_back(static_cast<int>(rng() % kNumClasses));
      preds.push_back(static_cast<int>(argmax(probs.back().data())));
    }
    const double acc = accuracy(preds, truths);
    violations += topk_accuracy<float>(probs, truths, 1) != acc;
    double prev = 0.0;
    for (std::size_t k = 1; k <= kNumClasses; ++k) {
      const double a = topk_accuracy<float>(probs, truths, k);
      violations += a < prev;
      prev = a;
    }
    violations += prev != 1.0;
    const auto cm = confusion(preds, truths);
    violations += std::abs(static_cast<double>(cm.trace()) / static_cast<double>(cm.total()) - acc) > 1e-12;
  }
  return verdict(violations == 0, std::to_string(kMetricTrials) + " random prediction sets, " +
                                      std::to_string(violations) + " identity violations");
}

}  // namespace

int main() {
  struct Criterion {
    int id;
    const char* name;
    std::function<Outcome()> run;
  };
  const std::vector<Criterion> criteria{
      {1, "gradient_integrity", gradient_integrity},   {2, "memorization", memorization},
      {3, "shape_trace", shape_trace_check},           {4, "dataset_contract", dataset_contract},
      {5, "full_reproduction", full_reproduction},     {6, "oracle_equivalence", oracle_equivalence},
      {7, "early_stop_semantics", early_stop_semantics}, {8, "persistence", persistence},
      {9, "detection_pipeline", detection_pipeline},   {10, "metric_identities", metric_identities}};
  int failures = 0;
  for (const auto& c : criteria) {
    const auto t0 = std::chrono::steady_clock::now();
    Outcome o;
    try {
      o = c.run();
    } catch (const std::exception& e) {
      o = fail(std::string("exception: ") + e.what());
    }
    const char* tag = o.status == Status::kPass ? "PASS" : o.status == Status::kSkip ? "SKIP" : "FAIL";
    failures += o.status == Status::kFail;
    std::cout << "criterion " << c.id << " " << c.name << ": " << tag << " [" << fmt(seconds_since(t0), 3)
              << " s] " << o.detail << std::endl;
  }
  return failures == 0 ? 0 : 1;
}
