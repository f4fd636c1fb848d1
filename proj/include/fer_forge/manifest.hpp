#pragma once

#include <charconv>
#include <cstdint>
#include <fstream>
#include <istream>
#include <optional>
#include <sstream>
#include <stdexcept>
#include <string>
#include <string_view>
#include <vector>

#include "fer_forge/models.hpp"
#include "fer_forge/optim.hpp"
#include "fer_forge/train.hpp"

namespace fer {

class ManifestError : public std::runtime_error {
 public:
  ManifestError(std::size_t line, const std::string& what)
      : std::runtime_error("manifest line " + std::to_string(line) + ": " + what) {}
};

inline bool is_model_name(std::string_view name) { return name == "tree" || parse_architecture(name).has_value(); }

// One row of a hyperparameter grid. An unset learning rate means the
// optimizer's default.
struct SweepCell {
  OptimizerKind optimizer = OptimizerKind::kAdam;
  std::size_t batch = 128;
  std::size_t epochs = 20;
  std::optional<double> learning_rate;
  double decay = 0.0;

  OptimizerConfig optimizer_config() const {
    OptimizerConfig c = OptimizerConfig::defaults(optimizer);
    if (learning_rate) c.learning_rate = *learning_rate;
    c.decay = decay;
    return c;
  }
};

// Flat `key = value` run description. Every field is optional so that
// command-line flags can fill or override it.
struct RunManifest {
  std::vector<std::string> models;
  std::optional<std::string> data;
  std::optional<std::string> out;
  std::optional<OptimizerKind> optimizer;
  std::optional<double> learning_rate;
  std::optional<double> decay;
  std::optional<std::size_t> batch;
  std::optional<std::size_t> epochs;
  std::optional<std::uint64_t> seed;
  std::optional<bool> strict_epoch_eval;
  std::optional<bool> early_stopping;
  std::optional<std::size_t> early_stop_window;
  std::optional<double> early_stop_epsilon;
  std::optional<Monitor> monitor;
  std::optional<std::size_t> min_samples_split;
  std::optional<std::size_t> max_depth;
  std::optional<std::size_t> feature_subsample;
  std::vector<SweepCell> grid;
};

namespace detail {

inline std::string_view trim_space(std::string_view s) {
  while (!s.empty() && (s.front() == ' ' || s.front() == '\t')) s.remove_prefix(1);
  while (!s.empty() && (s.back() == ' ' || s.back() == '\t' || s.back() == '\r')) s.remove_suffix(1);
  return s;
}

template <typename T>
T parse_number(std::string_view v, std::size_t line, std::string_view key) {
  T out{};
  auto [p, ec] = std::from_chars(v.data(), v.data() + v.size(), out);
  if (ec != std::errc() || p != v.data() + v.size())
    throw ManifestError(line, "invalid value '" + std::string(v) + "' for " + std::string(key));
  return out;
}

inline bool parse_bool(std::string_view v, std::size_t line, std::string_view key) {
  if (v == "true" || v == "1" || v == "yes") return true;
  if (v == "false" || v == "0" || v == "no") return false;
  throw ManifestError(line, "invalid boolean '" + std::string(v) + "' for " + std::string(key));
}

inline OptimizerKind parse_optimizer_at(std::string_view v, std::size_t line) {
  const auto k = parse_optimizer(v);
  if (!k) throw ManifestError(line, "unknown optimizer '" + std::string(v) + "'");
  return *k;
}

inline std::vector<std::string_view> words(std::string_view v) {
  std::vector<std::string_view> out;
  std::size_t i = 0;
  while (i < v.size()) {
    while (i < v.size() && (v[i] == ' ' || v[i] == '\t')) ++i;
    const std::size_t start = i;
    while (i < v.size() && v[i] != ' ' && v[i] != '\t') ++i;
    if (i > start) out.push_back(v.substr(start, i - start));
  }
  return out;
}

}  // namespace detail

// Format: one `key = value` per line, `#` starts a comment. Repeated
// `cell = <optimizer> <batch> <epochs> <lr|default> <decay>` lines form a
// sweep grid. Unknown keys are rejected.
inline RunManifest parse_manifest(std::istream& in) {
  RunManifest m;
  std::string raw;
  std::size_t line = 0;
  while (std::getline(in, raw)) {
    ++line;
    std::string_view s = raw;
    if (const auto hash = s.find('#'); hash != std::string_view::npos) s = s.substr(0, hash);
    s = detail::trim_space(s);
    if (s.empty()) continue;
    const auto eq = s.find('=');
    if (eq == std::string_view::npos) throw ManifestError(line, "expected 'key = value'");
    const auto key = detail::trim_space(s.substr(0, eq));
    const auto value = detail::trim_space(s.substr(eq + 1));
    if (value.empty()) throw ManifestError(line, "empty value for " + std::string(key));
    using detail::parse_number;
    if (key == "model" || key == "models") {
      for (auto w : detail::words(value)) {
        if (!is_model_name(w)) throw ManifestError(line, "unknown model '" + std::string(w) + "'");
        m.models.emplace_back(w);
      }
    } else if (key == "data") {
      m.data = std::string(value);
    } else if (key == "out") {
      m.out = std::string(value);
    } else if (key == "optimizer") {
      m.optimizer = detail::parse_optimizer_at(value, line);
    } else if (key == "lr") {
      m.learning_rate = parse_number<double>(value, line, key);
    } else if (key == "decay") {
      m.decay = parse_number<double>(value, line, key);
    } else if (key == "batch") {
      m.batch = parse_number<std::size_t>(value, line, key);
    } else if (key == "epochs") {
      m.epochs = parse_number<std::size_t>(value, line, key);
    } else if (key == "seed") {
      m.seed = parse_number<std::uint64_t>(value, line, key);
    } else if (key == "strict_epoch_eval") {
      m.strict_epoch_eval = detail::parse_bool(value, line, key);
    } else if (key == "early_stopping") {
      m.early_stopping = detail::parse_bool(value, line, key);
    } else if (key == "early_stop_window") {
      m.early_stop_window = parse_number<std::size_t>(value, line, key);
    } else if (key == "early_stop_epsilon") {
      m.early_stop_epsilon = parse_number<double>(value, line, key);
    } else if (key == "monitor") {
      if (value == "train") m.monitor = Monitor::kTrain;
      else if (value == "test") m.monitor = Monitor::kTest;
      else throw ManifestError(line, "monitor must be 'train' or 'test'");
    } else if (key == "min_samples_split") {
      m.min_samples_split = parse_number<std::size_t>(value, line, key);
    } else if (key == "max_depth") {
      m.max_depth = parse_number<std::size_t>(value, line, key);
    } else if (key == "feature_subsample") {
      m.feature_subsample = parse_number<std::size_t>(value, line, key);
    } else if (key == "cell") {
      const auto w = detail::words(value);
      if (w.size() != 5) throw ManifestError(line, "cell needs: optimizer batch epochs lr decay");
      SweepCell c;
      c.optimizer = detail::parse_optimizer_at(w[0], line);
      c.batch = parse_number<std::size_t>(w[1], line, "batch");
      c.epochs = parse_number<std::size_t>(w[2], line, "epochs");
      if (w[3] != "default") c.learning_rate = parse_number<double>(w[3], line, "lr");
      c.decay = parse_number<double>(w[4], line, "decay");
      if (c.batch < 1) throw ManifestError(line, "cell batch must be >= 1");
      m.grid.push_back(c);
    } else {
      throw ManifestError(line, "unknown key '" + std::string(key) + "'");
    }
  }
  return m;
}

inline RunManifest parse_manifest(std::string_view text) {
  std::istringstream in{std::string(text)};
  return parse_manifest(in);
}

inline RunManifest load_manifest(const std::string& path) {
  std::ifstream in(path);
  if (!in) throw std::runtime_error("cannot open manifest " + path);
  return parse_manifest(in);
}

}  // namespace fer
