#pragma once

#include <algorithm>
#include <array>
#include <charconv>
#include <cmath>
#include <cstdint>
#include <numbers>
#include <ostream>
#include <random>
#include <span>
#include <string_view>
#include <vector>

#include "fer_forge/data.hpp"
#include "fer_forge/rng.hpp"

namespace fer {

// Generators for stand-in data with the FER-2013 file layout, used when the
// real dataset is not available.

struct FerComposition {
  ClassCounts training{};
  ClassCounts public_test{};
  ClassCounts private_test{};

  std::size_t total() const {
    std::size_t n = 0;
    for (std::size_t c = 0; c < kNumClasses; ++c) n += training[c] + public_test[c] + private_test[c];
    return n;
  }
};

// Per-class row counts of the distributed FER-2013 file.
inline constexpr FerComposition kFer2013Composition{
    {3995, 436, 4097, 7215, 4830, 3171, 4965},
    {467, 56, 496, 895, 653, 415, 607},
    {491, 55, 528, 879, 594, 416, 626}};

// Smooth random 48x48 pattern: a few low-frequency sinusoids plus noise.
inline std::array<std::uint8_t, kPixelsPerImage> synthetic_pixels(std::uint64_t seed) {
  std::array<double, 12> p{};
  for (std::size_t k = 0; k < p.size(); ++k) p[k] = counter_uniform(seed, k);
  std::array<std::uint8_t, kPixelsPerImage> px{};
  constexpr double two_pi = 2.0 * std::numbers::pi;
  for (std::size_t y = 0; y < kImageSide; ++y)
    for (std::size_t x = 0; x < kImageSide; ++x) {
      double v = 128.0;
      for (std::size_t k = 0; k < 3; ++k) {
        const double fx = 1.0 + 3.0 * p[4 * k], fy = 1.0 + 3.0 * p[4 * k + 1];
        v += 40.0 * (p[4 * k + 2] + 0.5) *
             std::sin(two_pi * (fx * static_cast<double>(x) + fy * static_cast<double>(y)) / kImageSide +
                      two_pi * p[4 * k + 3]);
      }
      v += 24.0 * (counter_uniform(seed, 100 + y * kImageSide + x) - 0.5);
      px[y * kImageSide + x] = static_cast<std::uint8_t>(std::clamp(std::lround(v), 0L, 255L));
    }
  return px;
}

// `n` training records with labels cycling through 0..6.
inline std::vector<FerRecord> synthetic_records(std::size_t n, std::uint64_t seed) {
  std::vector<FerRecord> out(n);
  for (std::size_t i = 0; i < n; ++i) {
    out[i].emotion = static_cast<int>(i % kNumClasses);
    out[i].pixels = synthetic_pixels(derive_seed(seed, SeedStream::kSynthetic, i));
    out[i].usage = Usage::kTraining;
    out[i].row = i + 2;
  }
  return out;
}

inline std::string_view usage_name(Usage u) {
  switch (u) {
    case Usage::kTraining: return "Training";
    case Usage::kPublicTest: return "PublicTest";
    case Usage::kPrivateTest: return "PrivateTest";
    case Usage::kUnspecified: break;
  }
  return "";
}

namespace detail {

inline void write_fer_row(std::ostream& os, int emotion, const std::array<std::uint8_t, kPixelsPerImage>& px,
                          Usage usage) {
  std::array<char, kPixelsPerImage * 4 + 32> buf{};
  char* p = buf.data();
  p = std::to_chars(p, buf.data() + buf.size(), emotion).ptr;
  *p++ = ',';
  for (std::size_t i = 0; i < px.size(); ++i) {
    if (i) *p++ = ' ';
    p = std::to_chars(p, buf.data() + buf.size(), static_cast<int>(px[i])).ptr;
  }
  os.write(buf.data(), p - buf.data());
  if (usage != Usage::kUnspecified) os << ',' << usage_name(usage);
  os << '\n';
}

}  // namespace detail

inline void write_fer_csv(std::ostream& os, std::span<const FerRecord> records, bool with_usage = true) {
  os << (with_usage ? "emotion,pixels,Usage\n" : "emotion,pixels\n");
  for (const auto& r : records) detail::write_fer_row(os, r.emotion, r.pixels, with_usage ? r.usage : Usage::kUnspecified);
}

// Streams a full-size file with the given composition: Training rows, then
// PublicTest, then PrivateTest, labels shuffled within each block.
inline void write_synthetic_fer_csv(std::ostream& os, const FerComposition& comp, std::uint64_t seed) {
  os << "emotion,pixels,Usage\n";
  std::mt19937_64 rng(derive_seed(seed, SeedStream::kSynthetic, 0xC0FFEE));
  std::size_t row = 0;
  const std::array<std::pair<Usage, const ClassCounts*>, 3> blocks{
      {{Usage::kTraining, &comp.training}, {Usage::kPublicTest, &comp.public_test}, {Usage::kPrivateTest, &comp.private_test}}};
  for (const auto& [usage, counts] : blocks) {
    std::vector<int> labels;
    for (std::size_t c = 0; c < kNumClasses; ++c) labels.insert(labels.end(), (*counts)[c], static_cast<int>(c));
    std::shuffle(labels.begin(), labels.end(), rng);
    for (int label : labels) detail::write_fer_row(os, label, synthetic_pixels(derive_seed(seed, SeedStream::kSynthetic, row++)), usage);
  }
}

}  // namespace fer
