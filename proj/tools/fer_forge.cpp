#include <chrono>
#include <cstdio>
#include <filesystem>
#include <fstream>
#include <iomanip>
#include <iostream>
#include <map>
#include <optional>
#include <sstream>
#include <string>
#include <vector>

#include <CLI11.hpp>

#include "fer_forge/fer_forge.hpp"

namespace fs = std::filesystem;
using namespace fer;

namespace {

constexpr int kExitOk = 0;
constexpr int kExitFailure = 1;
constexpr int kExitUsage = 2;

// Input or usage problem: reported with exit code 2.
struct UsageError : std::runtime_error {
  using std::runtime_error::runtime_error;
};

struct Flags {
  std::string manifest;
  std::vector<std::string> models;
  std::string data;
  std::string out;
  std::string optimizer;
  std::optional<double> lr;
  std::optional<double> decay;
  std::optional<std::size_t> batch;
  std::optional<std::size_t> epochs;
  std::optional<std::uint64_t> seed;
  bool strict_epoch_eval = false;
  bool no_early_stop = false;
  std::string monitor;
  std::optional<std::size_t> min_samples_split;
  std::optional<std::size_t> max_depth;
  std::optional<std::size_t> feature_subsample;
  std::string model_path;
  std::string image;
  std::string cascade;
  std::size_t min_neighbors = 3;
  double scale_factor = 1.1;
  std::size_t min_size = 0;
  std::optional<std::size_t> corrupt_layer;
};

// Everything one training run needs, after merging manifest and flags.
struct RunSettings {
  std::vector<std::string> models;
  std::string data;
  std::string out = "fer_forge_run";
  OptimizerConfig optimizer = OptimizerConfig::defaults(OptimizerKind::kAdam);
  std::size_t batch = 128;
  std::size_t epochs = 100;
  std::uint64_t seed = 42;
  bool strict_epoch_eval = false;
  bool early_stopping = true;
  std::size_t early_stop_window = 4;
  double early_stop_epsilon = 5e-4;
  Monitor monitor = Monitor::kTrain;
  TreeConfig tree;
  std::vector<SweepCell> grid;
};

RunSettings resolve(const Flags& f) {
  RunManifest m;
  if (!f.manifest.empty()) {
    if (!fs::exists(f.manifest)) throw UsageError("manifest not found: " + f.manifest);
    m = load_manifest(f.manifest);
  }
  RunSettings s;
  s.models = f.models.empty() ? m.models : f.models;
  for (const auto& name : s.models)
    if (!is_model_name(name)) throw UsageError("unknown model '" + name + "' (tree, ffnn, simple_cnn, proposed_cnn)");
  s.data = !f.data.empty() ? f.data : m.data.value_or("");
  s.out = !f.out.empty() ? f.out : m.out.value_or(s.out);
  OptimizerKind kind = m.optimizer.value_or(OptimizerKind::kAdam);
  if (!f.optimizer.empty()) {
    const auto k = parse_optimizer(f.optimizer);
    if (!k) throw UsageError("unknown optimizer '" + f.optimizer + "' (sgd, rmsprop, adam)");
    kind = *k;
  }
  s.optimizer = OptimizerConfig::defaults(kind);
  if (auto lr = f.lr ? f.lr : m.learning_rate) s.optimizer.learning_rate = *lr;
  if (auto d = f.decay ? f.decay : m.decay) s.optimizer.decay = *d;
  s.batch = f.batch.value_or(m.batch.value_or(s.batch));
  s.epochs = f.epochs.value_or(m.epochs.value_or(s.epochs));
  s.seed = f.seed.value_or(m.seed.value_or(s.seed));
  s.strict_epoch_eval = f.strict_epoch_eval || m.strict_epoch_eval.value_or(false);
  s.early_stopping = !f.no_early_stop && m.early_stopping.value_or(true);
  s.early_stop_window = m.early_stop_window.value_or(s.early_stop_window);
  s.early_stop_epsilon = m.early_stop_epsilon.value_or(s.early_stop_epsilon);
  s.monitor = m.monitor.value_or(Monitor::kTrain);
  if (f.monitor == "test") s.monitor = Monitor::kTest;
  else if (!f.monitor.empty() && f.monitor != "train") throw UsageError("monitor must be 'train' or 'test'");
  s.tree.min_samples_split = f.min_samples_split.value_or(m.min_samples_split.value_or(s.tree.min_samples_split));
  s.tree.max_depth = f.max_depth ? f.max_depth : m.max_depth;
  s.tree.feature_subsample = f.feature_subsample ? f.feature_subsample : m.feature_subsample;
  s.tree.seed = s.seed;
  s.grid = m.grid;
  try {
    s.optimizer.validate();
    s.tree.validate();
  } catch (const std::invalid_argument& e) {
    throw UsageError(e.what());
  }
  if (s.batch < 1) throw UsageError("batch size must be >= 1");
  return s;
}

DatasetSplit load_split(const std::string& path, std::uint64_t seed) {
  if (path.empty()) throw UsageError("--data is required");
  if (!fs::is_regular_file(path)) throw UsageError("dataset not found: " + path);
  const auto records = load_fer_csv(path);
  auto split = split_dataset(records, seed);
  std::clog << "dataset: " << records.size() << " records, train " << split.train.size() << ", test "
            << split.test.size() << '\n';
  return split;
}

std::ofstream open_out(const fs::path& path) {
  std::ofstream os(path);
  if (!os) throw std::runtime_error("cannot write " + path.string());
  return os;
}

struct RunOutcome {
  double test_accuracy = 0.0;
  double top2 = 0.0;
  std::size_t epochs_run = 0;
  std::string stop_reason = "-";
};

void write_confusion(const fs::path& dir, const ConfusionMatrix& cm) {
  auto a = open_out(dir / "confusion.csv");
  cm.write_csv(a);
  auto b = open_out(dir / "confusion_rates.csv");
  cm.write_rates_csv(b);
  auto c = open_out(dir / "confusion.txt");
  cm.write_table(c);
}

// Trains one model on the split and writes its artifacts into `dir`.
RunOutcome run_model(const std::string& model, const DatasetSplit& split, const RunSettings& s, const fs::path& dir) {
  fs::create_directories(dir);
  RunOutcome outcome;
  if (model == "tree") {
    const auto x = FeatureMatrix::from_dataset(split.train);
    const auto root = fit_tree(x, split.train.labels, s.tree);
    std::clog << "tree: " << root->node_count() << " nodes, depth " << root->depth() << '\n';
    auto os = open_out(dir / "model.tree");
    write_tree(os, *root);
    std::vector<int> preds;
    for (const auto& img : split.test.images) preds.push_back(predict_tree(*root, img));
    if (!split.test.empty()) {
      outcome.test_accuracy = accuracy(preds, split.test.labels);
      outcome.top2 = std::numeric_limits<double>::quiet_NaN();
    }
    write_confusion(dir, confusion(preds, split.test.labels));
    return outcome;
  }

  ModelOptions opts;
  opts.seed = s.seed;
  Network<float> net = build_network<float>(*parse_architecture(model), opts);
  auto epochs_csv = open_out(dir / "epochs.csv");
  write_epoch_csv_header(epochs_csv);
  if (s.epochs > 0) {
    TrainConfig cfg;
    cfg.optimizer = s.optimizer;
    cfg.batch_size = s.batch;
    cfg.max_epochs = s.epochs;
    cfg.early_stopping = s.early_stopping;
    cfg.early_stop_window = s.early_stop_window;
    cfg.early_stop_epsilon = s.early_stop_epsilon;
    cfg.strict_epoch_eval = s.strict_epoch_eval;
    cfg.monitor = s.monitor;
    cfg.seed = s.seed;
    const auto result = train(net, split.train, cfg, &split.test, [&](const EpochLog& log) {
      write_epoch_csv_row(epochs_csv, log);
      epochs_csv.flush();
      std::clog << model << " epoch " << log.epoch << " loss " << log.loss << " accuracy " << log.accuracy << " ("
                << std::fixed << std::setprecision(1) << log.seconds << std::defaultfloat << std::setprecision(6)
                << " s)\n";
    });
    outcome.epochs_run = result.logs.size();
    outcome.stop_reason = std::string(stop_reason_name(result.reason));
  }
  save_model(net, dir / "model.femo");
  if (!split.test.empty()) {
    const auto ev = evaluate(net, split.test);
    outcome.test_accuracy = ev.accuracy;
    outcome.top2 = ev.top2;
    write_confusion(dir, ev.confusion);
  }
  return outcome;
}

int cmd_train(const Flags& f) {
  const RunSettings s = resolve(f);
  if (s.models.size() != 1) throw UsageError("train needs exactly one --model");
  const auto split = load_split(s.data, s.seed);
  const auto outcome = run_model(s.models.front(), split, s, s.out);
  std::cout << "test_accuracy " << std::setprecision(6) << outcome.test_accuracy << '\n';
  return kExitOk;
}

std::string format_lr(const SweepCell& c) {
  std::ostringstream os;
  os << c.optimizer_config().learning_rate;
  return os.str();
}

int cmd_sweep(const Flags& f) {
  RunSettings s = resolve(f);
  if (s.models.empty()) s.models = {"proposed_cnn"};
  fs::path out = s.out;
  std::optional<DatasetSplit> split;
  if (!s.grid.empty()) split = load_split(s.data, s.seed);
  fs::create_directories(out);
  auto table = open_out(out / "hyperparameters.csv");
  table << "model,optimizer,batch,epochs,lr,decay,test_accuracy,top2,epochs_run,stop_reason,status\n";
  std::map<std::string, double> best;
  std::size_t failures = 0;
  for (const auto& model : s.models) {
    for (std::size_t k = 0; k < s.grid.size(); ++k) {
      const SweepCell& cell = s.grid[k];
      if (model == "tree" && k > 0) break;  // the tree ignores optimizer settings
      RunSettings cs = s;
      cs.optimizer = cell.optimizer_config();
      cs.batch = cell.batch;
      cs.epochs = cell.epochs;
      std::ostringstream name;
      name << model << "_" << k << "_" << optimizer_name(cell.optimizer) << "_" << cell.batch << "_" << cell.epochs;
      table << model << ',' << optimizer_name(cell.optimizer) << ',' << cell.batch << ',' << cell.epochs << ','
            << format_lr(cell) << ',' << cell.decay << ',';
      try {
        const auto r = run_model(model, *split, cs, out / name.str());
        table << r.test_accuracy << ',' << r.top2 << ',' << r.epochs_run << ',' << r.stop_reason << ",ok\n";
        if (!best.count(model) || r.test_accuracy > best[model]) best[model] = r.test_accuracy;
      } catch (const std::exception& e) {
        ++failures;
        std::string msg = e.what();
        for (char& ch : msg)
          if (ch == ',' || ch == '\n') ch = ';';
        table << ",,,,error: " << msg << '\n';
        std::cerr << "cell " << name.str() << " failed: " << e.what() << '\n';
      }
      table.flush();
    }
  }
  if (s.models.size() > 1) {
    auto models = open_out(out / "models.csv");
    models << "model,test_accuracy\n";
    for (const auto& model : s.models)
      if (best.count(model)) models << model << ',' << best[model] << '\n';
  }
  if (failures) std::cerr << failures << " sweep cell(s) failed\n";
  return kExitOk;
}

bool is_tree_file(const std::string& path) { return fs::path(path).extension() == ".tree"; }

std::unique_ptr<TreeNode> load_tree_file(const std::string& path) {
  std::ifstream in(path);
  if (!in) throw UsageError("cannot open tree model " + path);
  return read_tree(in);
}

void require_file(const std::string& path, const char* what) {
  if (path.empty()) throw UsageError(std::string("--") + what + " is required");
  if (!fs::is_regular_file(path)) throw UsageError(std::string(what) + " not found: " + path);
}

int cmd_eval(const Flags& f) {
  require_file(f.model_path, "model");
  const RunSettings s = resolve(f);
  const auto split = load_split(s.data, s.seed);
  ConfusionMatrix cm;
  std::cout << std::setprecision(6);
  if (is_tree_file(f.model_path)) {
    const auto root = load_tree_file(f.model_path);
    std::vector<int> preds;
    for (const auto& img : split.test.images) preds.push_back(predict_tree(*root, img));
    cm = confusion(preds, split.test.labels);
    std::cout << "test_accuracy " << (split.test.empty() ? 0.0 : accuracy(preds, split.test.labels)) << '\n';
  } else {
    const auto net = load_model(f.model_path);
    const auto ev = evaluate(net, split.test);
    cm = ev.confusion;
    std::cout << "test_accuracy " << ev.accuracy << '\n' << "top2_accuracy " << ev.top2 << '\n';
  }
  cm.write_table(std::cout);
  if (!f.out.empty()) {
    fs::create_directories(f.out);
    write_confusion(f.out, cm);
  }
  return kExitOk;
}

Tensor<float> image_input(const AnyImage& image) {
  const Detection whole{0, 0, static_cast<int>(image_width(image)), static_cast<int>(image_height(image)), 0};
  return preprocess_face(image, whole);
}

void print_probabilities(std::ostream& os, const Tensor<float>& probs) {
  std::vector<std::size_t> order(kNumClasses);
  std::iota(order.begin(), order.end(), 0);
  std::stable_sort(order.begin(), order.end(), [&](std::size_t a, std::size_t b) { return probs[a] > probs[b]; });
  os << "emotion,probability\n";
  for (std::size_t c : order) os << emotion_name(c) << ',' << std::fixed << std::setprecision(9) << probs[c] << '\n';
  os << std::defaultfloat;
  os << "top1," << emotion_name(order[0]) << '\n';
  os << "top2," << emotion_name(order[0]) << ',' << emotion_name(order[1]) << '\n';
}

int cmd_predict(const Flags& f) {
  require_file(f.model_path, "model");
  require_file(f.image, "image");
  const auto net = load_model(f.model_path);
  const auto image = read_pnm(f.image);
  print_probabilities(std::cout, predict(net, image_input(image)));
  return kExitOk;
}

int cmd_detect(const Flags& f) {
  require_file(f.cascade, "cascade");
  require_file(f.image, "image");
  const auto cascade = load_cascade(f.cascade);
  const auto image = read_pnm(f.image);
  std::optional<Network<float>> net;
  if (!f.model_path.empty()) {
    require_file(f.model_path, "model");
    net = load_model(f.model_path);
  }
  DetectOptions opt;
  opt.scale_factor = f.scale_factor;
  opt.min_neighbors = f.min_neighbors;
  opt.min_w = opt.min_h = f.min_size;
  if (!(opt.scale_factor > 1.0)) throw UsageError("--scale-factor must be > 1");
  const auto dets = detect(cascade, to_gray(image), opt);
  std::cout << "x,y,w,h,neighbors";
  if (net)
    for (auto name : kEmotionNames) std::cout << ",p_" << name;
  if (net) std::cout << ",top1";
  std::cout << '\n';
  for (const auto& d : dets) {
    std::cout << d.x << ',' << d.y << ',' << d.w << ',' << d.h << ',' << d.neighbors;
    if (net) {
      const auto probs = predict(*net, preprocess_face(image, d));
      for (float p : probs.data()) std::cout << ',' << std::fixed << std::setprecision(9) << p << std::defaultfloat;
      std::cout << ',' << emotion_name(argmax(probs.data()));
    }
    std::cout << '\n';
  }
  return kExitOk;
}

int cmd_gradcheck(const Flags& f) {
  if (f.models.size() != 1) throw UsageError("gradcheck needs exactly one --model");
  const auto arch = parse_architecture(f.models.front());
  if (!arch) throw UsageError("gradcheck supports ffnn, simple_cnn and proposed_cnn");
  GradcheckOptions opt;
  opt.seed = f.seed.value_or(42);
  opt.corrupt_layer = f.corrupt_layer;
  const auto t0 = std::chrono::steady_clock::now();
  const auto report = gradcheck_architecture(*arch, opt);
  std::cout << std::setprecision(6);
  write_gradcheck_report(std::cout, report, opt.tolerance);
  std::clog << "gradcheck took "
            << std::chrono::duration<double>(std::chrono::steady_clock::now() - t0).count() << " s\n";
  return report.passed(opt.tolerance) ? kExitOk : kExitFailure;
}

int cmd_histogram(const Flags& f) {
  const RunSettings s = resolve(f);
  if (s.data.empty()) throw UsageError("--data is required");
  if (!fs::is_regular_file(s.data)) throw UsageError("dataset not found: " + s.data);
  const auto records = load_fer_csv(s.data);
  const auto split = split_dataset(records, s.seed);
  const std::vector<std::pair<std::string, ClassCounts>> sets{
      {"all", class_histogram(records)}, {"train", class_histogram(split.train)}, {"test", class_histogram(split.test)}};
  if (f.out.empty()) {
    write_histogram_csv(std::cout, sets);
  } else {
    fs::create_directories(f.out);
    auto os = open_out(fs::path(f.out) / "histogram.csv");
    write_histogram_csv(os, sets);
  }
  return kExitOk;
}

}  // namespace

int main(int argc, char** argv) {
  CLI::App app{"Facial emotion recognition toolkit"};
  app.require_subcommand(1);
  Flags f;

  auto add_run_flags = [&](CLI::App* sub) {
    sub->add_option("--manifest", f.manifest, "Run manifest (key = value); flags override it");
    sub->add_option("--data", f.data, "FER-2013 CSV");
    sub->add_option("--out", f.out, "Output directory");
    sub->add_option("--seed", f.seed, "Root seed (default 42)");
  };
  auto add_train_flags = [&](CLI::App* sub) {
    sub->add_option("--optimizer", f.optimizer, "sgd, rmsprop or adam");
    sub->add_option("--lr", f.lr, "Learning rate");
    sub->add_option("--decay", f.decay, "Inverse-time learning-rate decay");
    sub->add_option("--batch", f.batch, "Batch size");
    sub->add_option("--epochs", f.epochs, "Maximum epochs");
    sub->add_flag("--strict-epoch-eval", f.strict_epoch_eval, "Full pass for epoch accuracy");
    sub->add_flag("--no-early-stop", f.no_early_stop, "Disable early stopping");
    sub->add_option("--monitor", f.monitor, "Early-stopping metric: train or test");
    sub->add_option("--min-samples-split", f.min_samples_split, "Decision tree: minimum node size to split");
    sub->add_option("--max-depth", f.max_depth, "Decision tree: depth cap");
    sub->add_option("--feature-subsample", f.feature_subsample, "Decision tree: features tried per node");
  };

  auto* train_cmd = app.add_subcommand("train", "Train one model and report test accuracy");
  train_cmd->add_option("--model", f.models, "tree, ffnn, simple_cnn or proposed_cnn")->expected(1);
  add_run_flags(train_cmd);
  add_train_flags(train_cmd);

  auto* sweep_cmd = app.add_subcommand("sweep", "Run a hyperparameter grid");
  sweep_cmd->add_option("--model", f.models, "Models to sweep")->expected(1, 4);
  add_run_flags(sweep_cmd);
  add_train_flags(sweep_cmd);

  auto* eval_cmd = app.add_subcommand("eval", "Evaluate a saved model on the test split");
  eval_cmd->add_option("--model", f.model_path, "Model file (.femo or .tree)");
  add_run_flags(eval_cmd);

  auto* predict_cmd = app.add_subcommand("predict", "Classify a pre-cropped face image");
  predict_cmd->add_option("--model", f.model_path, "Model file");
  predict_cmd->add_option("--image", f.image, "PGM or PPM image");

  auto* detect_cmd = app.add_subcommand("detect", "Detect faces, optionally classifying each");
  detect_cmd->add_option("--cascade", f.cascade, "Cascade file");
  detect_cmd->add_option("--image", f.image, "PGM or PPM image");
  detect_cmd->add_option("--model", f.model_path, "Optional model file");
  detect_cmd->add_option("--min-neighbors", f.min_neighbors, "Minimum raw hits per detection")->capture_default_str();
  detect_cmd->add_option("--scale-factor", f.scale_factor, "Window growth per scale")->capture_default_str();
  detect_cmd->add_option("--min-size", f.min_size, "Smallest window side in pixels");

  auto* grad_cmd = app.add_subcommand("gradcheck", "Finite-difference check of every layer at toy size");
  grad_cmd->add_option("--model", f.models, "ffnn, simple_cnn or proposed_cnn")->expected(1);
  grad_cmd->add_option("--seed", f.seed, "Root seed (default 42)");
  grad_cmd->add_option("--corrupt-layer", f.corrupt_layer)->group("");

  auto* hist_cmd = app.add_subcommand("histogram", "Per-class counts as CSV");
  add_run_flags(hist_cmd);

  try {
    app.parse(argc, argv);
  } catch (const CLI::ParseError& e) {
    const int code = app.exit(e);
    return code == 0 ? kExitOk : kExitUsage;
  }

  try {
    if (*train_cmd) return cmd_train(f);
    if (*sweep_cmd) return cmd_sweep(f);
    if (*eval_cmd) return cmd_eval(f);
    if (*predict_cmd) return cmd_predict(f);
    if (*detect_cmd) return cmd_detect(f);
    if (*grad_cmd) return cmd_gradcheck(f);
    if (*hist_cmd) return cmd_histogram(f);
  } catch (const UsageError& e) {
    std::cerr << "error: " << e.what() << '\n';
    return kExitUsage;
  } catch (const ManifestError& e) {
    std::cerr << "error: " << e.what() << '\n';
    return kExitUsage;
  } catch (const DataFormatError& e) {
    std::cerr << "error: " << e.what() << '\n';
    return kExitUsage;
  } catch (const ImageFormatError& e) {
    std::cerr << "error: " << e.what() << '\n';
    return kExitUsage;
  } catch (const ModelFormatError& e) {
    std::cerr << "error: " << e.what() << '\n';
    return kExitUsage;
  } catch (const CascadeFormatError& e) {
    std::cerr << "error: " << e.what() << '\n';
    return kExitUsage;
  } catch (const std::exception& e) {
    std::cerr << "error: " << e.what() << '\n';
    return kExitFailure;
  }
  return kExitUsage;
}
