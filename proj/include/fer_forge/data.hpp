#pragma once

#include <algorithm>
#include <array>
#include <charconv>
#include <cmath>
#include <cstdint>
#include <fstream>
#include <functional>
#include <istream>
#include <numeric>
#include <ostream>
#include <random>
#include <span>
#include <stdexcept>
#include <string>
#include <string_view>
#include <utility>
#include <vector>

#include "fer_forge/models.hpp"
#include "fer_forge/rng.hpp"
#include "fer_forge/tensor.hpp"

namespace fer {

inline constexpr std::size_t kPixelsPerImage = kImageSide * kImageSide;

// Canonical FER-2013 label order.
inline constexpr std::array<std::string_view, kNumClasses> kEmotionNames{
    "angry", "disgust", "fear", "happy", "sad", "surprise", "neutral"};

inline std::string_view emotion_name(std::size_t label) {
  return label < kNumClasses ? kEmotionNames[label] : std::string_view("?");
}

enum class Usage { kTraining, kPublicTest, kPrivateTest, kUnspecified };

struct FerRecord {
  int emotion = 0;
  std::array<std::uint8_t, kPixelsPerImage> pixels{};
  Usage usage = Usage::kUnspecified;
  std::size_t row = 0;  // 1-based line number in the source file
};

class DataFormatError : public std::runtime_error {
 public:
  DataFormatError(std::size_t row, const std::string& what)
      : std::runtime_error("row " + std::to_string(row) + ": " + what), row_(row) {}
  std::size_t row() const noexcept { return row_; }

 private:
  std::size_t row_;
};

namespace detail {

inline std::string_view trim(std::string_view s) {
  while (!s.empty() && (s.front() == ' ' || s.front() == '\t' || s.front() == '"')) s.remove_prefix(1);
  while (!s.empty() && (s.back() == ' ' || s.back() == '\t' || s.back() == '\r' || s.back() == '"'))
    s.remove_suffix(1);
  return s;
}

inline std::vector<std::string_view> split_commas(std::string_view line) {
  std::vector<std::string_view> out;
  std::size_t start = 0;
  for (std::size_t i = 0; i <= line.size(); ++i)
    if (i == line.size() || line[i] == ',') {
      out.push_back(trim(line.substr(start, i - start)));
      start = i + 1;
    }
  return out;
}

inline Usage parse_usage(std::string_view s, std::size_t row) {
  if (s == "Training") return Usage::kTraining;
  if (s == "PublicTest") return Usage::kPublicTest;
  if (s == "PrivateTest") return Usage::kPrivateTest;
  throw DataFormatError(row, "unknown Usage '" + std::string(s) + "'");
}

}  // namespace detail

// Streams a FER-2013 CSV (`emotion,pixels,Usage`, or `emotion,pixels` when
// the usage column is absent). Any malformed row aborts the parse.
inline std::vector<FerRecord> parse_fer_csv(std::istream& in) {
  std::string line;
  std::size_t row = 1;
  if (!std::getline(in, line)) throw DataFormatError(1, "missing header row");
  const auto header = detail::split_commas(line);
  const bool with_usage = header.size() == 3;
  if (header.size() < 2 || header.size() > 3 || header[0] != "emotion" || header[1] != "pixels" ||
      (with_usage && header[2] != "Usage"))
    throw DataFormatError(1, "expected header 'emotion,pixels,Usage', got '" +
                                 std::string(detail::trim(line)) + "'");
  const std::size_t columns = header.size();

  std::vector<FerRecord> records;
  while (std::getline(in, line)) {
    ++row;
    if (detail::trim(line).empty()) continue;
    const auto fields = detail::split_commas(line);
    if (fields.size() != columns)
      throw DataFormatError(row, "expected " + std::to_string(columns) + " columns, got " +
                                     std::to_string(fields.size()));
    FerRecord rec;
    rec.row = row;
    int emotion = -1;
    const auto e = fields[0];
    auto [eptr, eec] = std::from_chars(e.data(), e.data() + e.size(), emotion);
    if (eec != std::errc() || eptr != e.data() + e.size())
      throw DataFormatError(row, "emotion '" + std::string(e) + "' is not an integer");
    if (emotion < 0 || emotion >= static_cast<int>(kNumClasses))
      throw DataFormatError(row, "emotion " + std::to_string(emotion) + " outside 0..6");
    rec.emotion = emotion;

    const std::string_view px = fields[1];
    const char* p = px.data();
    const char* end = px.data() + px.size();
    std::size_t count = 0;
    while (p < end) {
      while (p < end && *p == ' ') ++p;
      if (p == end) break;
      int v = 0;
      auto [next, ec] = std::from_chars(p, end, v);
      if (ec != std::errc() || (next < end && *next != ' '))
        throw DataFormatError(row, "non-integer pixel value at position " + std::to_string(count));
      if (v < 0 || v > 255)
        throw DataFormatError(row, "pixel value " + std::to_string(v) + " outside 0..255");
      if (count < kPixelsPerImage) rec.pixels[count] = static_cast<std::uint8_t>(v);
      ++count;
      p = next;
    }
    if (count != kPixelsPerImage)
      throw DataFormatError(row, "expected " + std::to_string(kPixelsPerImage) + " pixels, got " +
                                     std::to_string(count));
    rec.usage = with_usage ? detail::parse_usage(fields[2], row) : Usage::kUnspecified;
    records.push_back(rec);
  }
  return records;
}

inline std::vector<FerRecord> load_fer_csv(const std::string& path) {
  std::ifstream in(path, std::ios::binary);
  if (!in) throw std::runtime_error("cannot open dataset " + path);
  return parse_fer_csv(in);
}

inline float normalize_pixel(std::uint8_t v) { return static_cast<float>(v) / 255.0f; }

inline std::uint8_t denormalize_pixel(float v) {
  return static_cast<std::uint8_t>(std::lround(std::clamp(v, 0.0f, 1.0f) * 255.0f));
}

inline Tensor<float> one_hot(int label) {
  if (label < 0 || label >= static_cast<int>(kNumClasses))
    throw std::out_of_range("label " + std::to_string(label) + " outside 0..6");
  Tensor<float> t({kNumClasses});
  t[static_cast<std::size_t>(label)] = 1.0f;
  return t;
}

inline Tensor<float> image_tensor(std::span<const std::uint8_t> pixels) {
  Tensor<float> t({1, kImageSide, kImageSide});
  for (std::size_t i = 0; i < kPixelsPerImage; ++i) t[i] = normalize_pixel(pixels[i]);
  return t;
}

struct LabeledDataset {
  std::vector<Tensor<float>> images;   // [1,48,48] in [0,1]
  std::vector<int> labels;             // 0..6
  std::vector<Tensor<float>> onehots;  // [7]
  std::vector<std::size_t> source_rows;

  std::size_t size() const { return labels.size(); }
  bool empty() const { return labels.empty(); }

  void add(Tensor<float> image, int label, std::size_t source_row = 0) {
    onehots.push_back(one_hot(label));
    images.push_back(std::move(image));
    labels.push_back(label);
    source_rows.push_back(source_row);
  }

  LabeledDataset subset(std::span<const std::size_t> indices) const {
    LabeledDataset out;
    for (std::size_t i : indices) out.add(images.at(i), labels.at(i), source_rows.at(i));
    return out;
  }
};

inline LabeledDataset make_dataset(std::span<const FerRecord> records) {
  LabeledDataset d;
  d.images.reserve(records.size());
  for (const auto& r : records) d.add(image_tensor(r.pixels), r.emotion, r.row);
  return d;
}

struct DatasetSplit {
  LabeledDataset train;
  LabeledDataset test;
};

// Training rows go to train, PublicTest and PrivateTest rows to test. Files
// without a usage column fall back to a seeded 80:20 shuffle split.
inline DatasetSplit split_dataset(std::span<const FerRecord> records, std::uint64_t seed = 42) {
  std::vector<FerRecord> train, test;
  const bool tagged = std::any_of(records.begin(), records.end(),
                                  [](const FerRecord& r) { return r.usage != Usage::kUnspecified; });
  if (tagged) {
    for (const auto& r : records) (r.usage == Usage::kTraining ? train : test).push_back(r);
  } else {
    std::vector<std::size_t> order(records.size());
    std::iota(order.begin(), order.end(), 0);
    std::mt19937_64 rng(derive_seed(seed, SeedStream::kSplit));
    std::shuffle(order.begin(), order.end(), rng);
    const std::size_t n_train = (records.size() * 4 + 2) / 5;
    std::vector<bool> is_train(records.size(), false);
    for (std::size_t i = 0; i < n_train; ++i) is_train[order[i]] = true;
    for (std::size_t i = 0; i < records.size(); ++i) (is_train[i] ? train : test).push_back(records[i]);
  }
  return {make_dataset(train), make_dataset(test)};
}

using ClassCounts = std::array<std::size_t, kNumClasses>;

inline ClassCounts class_histogram(std::span<const int> labels) {
  ClassCounts counts{};
  for (int l : labels) ++counts.at(static_cast<std::size_t>(l));
  return counts;
}

inline ClassCounts class_histogram(const LabeledDataset& d) { return class_histogram(d.labels); }

inline ClassCounts class_histogram(std::span<const FerRecord> records) {
  ClassCounts counts{};
  for (const auto& r : records) ++counts.at(static_cast<std::size_t>(r.emotion));
  return counts;
}

inline void write_histogram_csv(std::ostream& os, const std::vector<std::pair<std::string, ClassCounts>>& sets) {
  os << "set,class,emotion,count\n";
  for (const auto& [name, counts] : sets)
    for (std::size_t c = 0; c < kNumClasses; ++c)
      os << name << ',' << c << ',' << emotion_name(c) << ',' << counts[c] << '\n';
}

// Per-epoch index batches: seeded shuffle, final short batch kept.
inline std::vector<std::vector<std::size_t>> batch_indices(std::size_t n, std::size_t batch_size,
                                                           std::uint64_t seed) {
  if (batch_size < 1) throw std::invalid_argument("batch size must be >= 1");
  std::vector<std::size_t> order(n);
  std::iota(order.begin(), order.end(), 0);
  std::mt19937_64 rng(seed);
  std::shuffle(order.begin(), order.end(), rng);
  std::vector<std::vector<std::size_t>> out;
  for (std::size_t start = 0; start < n; start += batch_size)
    out.emplace_back(order.begin() + static_cast<std::ptrdiff_t>(start),
                     order.begin() + static_cast<std::ptrdiff_t>(std::min(n, start + batch_size)));
  return out;
}

struct Batch {
  std::vector<std::size_t> indices;
  std::vector<std::reference_wrapper<const Tensor<float>>> images;
  std::vector<std::reference_wrapper<const Tensor<float>>> onehots;
};

// Iterates one epoch of (images, one-hot) batches over a dataset.
class BatchStream {
 public:
  BatchStream(const LabeledDataset& data, std::size_t batch_size, std::uint64_t seed)
      : data_(data), plan_(batch_indices(data.size(), batch_size, seed)) {}

  std::size_t batch_count() const { return plan_.size(); }

  bool next(Batch& out) {
    if (cursor_ == plan_.size()) return false;
    out.indices = plan_[cursor_++];
    out.images.clear();
    out.onehots.clear();
    for (std::size_t i : out.indices) {
      out.images.emplace_back(data_.images[i]);
      out.onehots.emplace_back(data_.onehots[i]);
    }
    return true;
  }

 private:
  const LabeledDataset& data_;
  std::vector<std::vector<std::size_t>> plan_;
  std::size_t cursor_ = 0;
};

}  // namespace fer
