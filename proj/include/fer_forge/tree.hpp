#pragma once

#include <algorithm>
#include <array>
#include <cmath>
#include <cstdint>
#include <istream>
#include <memory>
#include <numeric>
#include <optional>
#include <ostream>
#include <random>
#include <span>
#include <sstream>
#include <stdexcept>
#include <string>
#include <vector>

#include "fer_forge/data.hpp"
#include "fer_forge/rng.hpp"

namespace fer {

using TreeCounts = std::array<std::uint64_t, kNumClasses>;

// Sample-major matrix of 8-bit features (raw pixel values).
struct FeatureMatrix {
  std::size_t rows = 0;
  std::size_t cols = 0;
  std::vector<std::uint8_t> values;

  FeatureMatrix() = default;
  FeatureMatrix(std::size_t r, std::size_t c) : rows(r), cols(c), values(r * c) {}

  std::uint8_t at(std::size_t r, std::size_t c) const { return values[r * cols + c]; }
  std::span<const std::uint8_t> row(std::size_t r) const { return {values.data() + r * cols, cols}; }

  static FeatureMatrix from_records(std::span<const FerRecord> records) {
    FeatureMatrix m(records.size(), kPixelsPerImage);
    for (std::size_t i = 0; i < records.size(); ++i)
      std::copy(records[i].pixels.begin(), records[i].pixels.end(), m.values.begin() + i * kPixelsPerImage);
    return m;
  }

  static FeatureMatrix from_dataset(const LabeledDataset& d) {
    FeatureMatrix m(d.size(), kPixelsPerImage);
    for (std::size_t i = 0; i < d.size(); ++i)
      for (std::size_t k = 0; k < kPixelsPerImage; ++k) m.values[i * kPixelsPerImage + k] = denormalize_pixel(d.images[i][k]);
    return m;
  }
};

struct TreeConfig {
  std::size_t min_samples_split = 40;
  std::optional<std::size_t> max_depth;
  std::optional<std::size_t> feature_subsample;  // features tried per node; unset = all
  std::uint64_t seed = 42;

  void validate() const {
    if (min_samples_split < 2) throw std::invalid_argument("min_samples_split must be >= 2");
    if (feature_subsample && *feature_subsample < 1) throw std::invalid_argument("feature_subsample must be >= 1");
  }
};

struct TreeNode {
  bool leaf = true;
  std::size_t feature = 0;
  double threshold = 0.0;  // go left when value <= threshold
  std::unique_ptr<TreeNode> left;
  std::unique_ptr<TreeNode> right;
  TreeCounts counts{};  // class counts of the training samples that reached this node
  int predicted = 0;

  std::size_t depth() const { return leaf ? 0 : 1 + std::max(left->depth(), right->depth()); }
  std::size_t node_count() const { return leaf ? 1 : 1 + left->node_count() + right->node_count(); }
};

inline double gini(std::span<const std::uint64_t> counts) {
  const std::uint64_t n = std::accumulate(counts.begin(), counts.end(), std::uint64_t{0});
  if (n == 0) throw std::invalid_argument("gini of an empty node");
  double sq = 0.0;
  for (auto c : counts) sq += static_cast<double>(c) * static_cast<double>(c);
  return 1.0 - sq / (static_cast<double>(n) * static_cast<double>(n));
}

inline int majority_class(const TreeCounts& counts) {
  return static_cast<int>(std::max_element(counts.begin(), counts.end()) - counts.begin());
}

namespace detail {

struct SplitChoice {
  bool found = false;
  std::size_t feature = 0;
  double threshold = 0.0;
  double weighted_gini = 0.0;
};

// Weighted child impurity from class-count sums of squares.
inline double weighted_gini(double n_left, double sq_left, double n_right, double sq_right) {
  return ((n_left - sq_left / n_left) + (n_right - sq_right / n_right)) / (n_left + n_right);
}

class TreeBuilder {
 public:
  TreeBuilder(const FeatureMatrix& x, std::span<const int> y, const TreeConfig& cfg)
      : x_(x), y_(y), cfg_(cfg), rng_(derive_seed(cfg.seed, SeedStream::kTree)) {}

  std::unique_ptr<TreeNode> grow(std::vector<std::size_t>& idx, std::size_t depth) {
    auto node = std::make_unique<TreeNode>();
    for (std::size_t i : idx) ++node->counts[static_cast<std::size_t>(y_[i])];
    node->predicted = majority_class(node->counts);
    const double parent = gini(node->counts);
    if (idx.size() < cfg_.min_samples_split || parent == 0.0 || (cfg_.max_depth && depth >= *cfg_.max_depth))
      return node;

    const SplitChoice split = best_split(idx, node->counts);
    // A split must strictly reduce impurity.
    if (!split.found || !(split.weighted_gini < parent - 1e-12)) return node;

    std::vector<std::size_t> left, right;
    for (std::size_t i : idx) (x_.at(i, split.feature) <= split.threshold ? left : right).push_back(i);
    idx.clear();
    idx.shrink_to_fit();
    node->leaf = false;
    node->feature = split.feature;
    node->threshold = split.threshold;
    node->left = grow(left, depth + 1);
    node->right = grow(right, depth + 1);
    return node;
  }

 private:
  std::vector<std::size_t> candidate_features() {
    std::vector<std::size_t> f(x_.cols);
    std::iota(f.begin(), f.end(), 0);
    if (cfg_.feature_subsample && *cfg_.feature_subsample < f.size()) {
      std::shuffle(f.begin(), f.end(), rng_);
      f.resize(*cfg_.feature_subsample);
      std::sort(f.begin(), f.end());
    }
    return f;
  }

  // Scans features in index order and thresholds in ascending order; the
  // first strictly better candidate wins.
  SplitChoice best_split(const std::vector<std::size_t>& idx, const TreeCounts& node_counts) {
    SplitChoice best;
    const double n = static_cast<double>(idx.size());
    double sq_total = 0.0;
    for (auto c : node_counts) sq_total += static_cast<double>(c) * static_cast<double>(c);

    for (std::size_t f : candidate_features()) {
      // Histogram of (value, class) over the node's samples; hist_ is all
      // zeros between features.
      std::uint8_t lo = 255, hi = 0;
      for (std::size_t i : idx) {
        const std::uint8_t v = x_.at(i, f);
        ++hist_[v][static_cast<std::size_t>(y_[i])];
        lo = std::min(lo, v);
        hi = std::max(hi, v);
      }
      if (lo == hi) {
        hist_[lo].fill(0);
        continue;
      }
      TreeCounts left{};
      double n_left = 0.0, sq_left = 0.0, sq_right = sq_total;
      int prev = -1;
      for (int v = lo; v <= hi; ++v) {
        const auto& bucket = hist_[static_cast<std::size_t>(v)];
        std::uint64_t bucket_n = 0;
        for (auto c : bucket) bucket_n += c;
        if (bucket_n == 0) continue;
        if (prev >= 0) {
          const double wg = weighted_gini(n_left, sq_left, n - n_left, sq_right);
          if (!best.found || wg < best.weighted_gini) {
            best = {true, f, (prev + v) / 2.0, wg};
          }
        }
        for (std::size_t c = 0; c < kNumClasses; ++c) {
          if (bucket[c] == 0) continue;
          const double l0 = static_cast<double>(left[c]);
          const double r0 = static_cast<double>(node_counts[c] - left[c]);
          const double k = static_cast<double>(bucket[c]);
          sq_left += (l0 + k) * (l0 + k) - l0 * l0;
          sq_right += (r0 - k) * (r0 - k) - r0 * r0;
          left[c] += bucket[c];
        }
        n_left += static_cast<double>(bucket_n);
        prev = v;
      }
      for (int v = lo; v <= hi; ++v) hist_[static_cast<std::size_t>(v)].fill(0);
    }
    return best;
  }

  const FeatureMatrix& x_;
  std::span<const int> y_;
  TreeConfig cfg_;
  std::mt19937_64 rng_;
  std::array<TreeCounts, 256> hist_{};
};

}  // namespace detail

// Greedy CART growth minimizing weighted child Gini impurity. Candidate
// thresholds are midpoints between consecutive distinct feature values.
inline std::unique_ptr<TreeNode> fit_tree(const FeatureMatrix& x, std::span<const int> labels,
                                          const TreeConfig& cfg = {}) {
  cfg.validate();
  if (x.rows == 0) throw std::invalid_argument("fit_tree: empty dataset");
  if (labels.size() != x.rows) throw std::invalid_argument("fit_tree: label count differs from row count");
  for (int l : labels)
    if (l < 0 || l >= static_cast<int>(kNumClasses)) throw std::out_of_range("fit_tree: label outside 0..6");
  std::vector<std::size_t> idx(x.rows);
  std::iota(idx.begin(), idx.end(), 0);
  detail::TreeBuilder builder(x, labels, cfg);
  return builder.grow(idx, 0);
}

inline int predict_tree(const TreeNode& root, std::span<const std::uint8_t> features) {
  const TreeNode* node = &root;
  while (!node->leaf) node = features[node->feature] <= node->threshold ? node->left.get() : node->right.get();
  return node->predicted;
}

inline int predict_tree(const TreeNode& root, const Tensor<float>& image) {
  std::vector<std::uint8_t> px(image.size());
  for (std::size_t i = 0; i < image.size(); ++i) px[i] = denormalize_pixel(image[i]);
  return predict_tree(root, px);
}

// Depth-first text form, one node per line:
//   I <feature> <threshold>
//   L <class> <count_0> ... <count_6>
inline void write_tree(std::ostream& os, const TreeNode& node) {
  if (node.leaf) {
    os << "L " << node.predicted;
    for (auto c : node.counts) os << ' ' << c;
    os << '\n';
    return;
  }
  std::ostringstream thr;
  thr.precision(17);
  thr << node.threshold;
  os << "I " << node.feature << ' ' << thr.str() << '\n';
  write_tree(os, *node.left);
  write_tree(os, *node.right);
}

namespace detail {

inline std::unique_ptr<TreeNode> read_tree_node(std::istream& is, std::size_t& line_no) {
  std::string line;
  while (std::getline(is, line)) {
    ++line_no;
    if (line.find_first_not_of(" \t\r") == std::string::npos) continue;
    std::istringstream ls(line);
    char tag = 0;
    ls >> tag;
    auto node = std::make_unique<TreeNode>();
    if (tag == 'L') {
      ls >> node->predicted;
      for (auto& c : node->counts) ls >> c;
      if (!ls || node->predicted < 0 || node->predicted >= static_cast<int>(kNumClasses))
        throw std::runtime_error("tree line " + std::to_string(line_no) + ": malformed leaf");
      return node;
    }
    if (tag == 'I') {
      node->leaf = false;
      ls >> node->feature >> node->threshold;
      if (!ls) throw std::runtime_error("tree line " + std::to_string(line_no) + ": malformed internal node");
      node->left = read_tree_node(is, line_no);
      node->right = read_tree_node(is, line_no);
      for (std::size_t c = 0; c < kNumClasses; ++c) node->counts[c] = node->left->counts[c] + node->right->counts[c];
      node->predicted = majority_class(node->counts);
      return node;
    }
    throw std::runtime_error("tree line " + std::to_string(line_no) + ": unknown node tag");
  }
  throw std::runtime_error("tree file truncated after line " + std::to_string(line_no));
}

}  // namespace detail

inline std::unique_ptr<TreeNode> read_tree(std::istream& is) {
  std::size_t line_no = 0;
  return detail::read_tree_node(is, line_no);
}

}  // namespace fer
