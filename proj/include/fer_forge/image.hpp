#pragma once

#include <algorithm>
#include <cmath>
#include <cstdint>
#include <filesystem>
#include <fstream>
#include <iterator>
#include <ostream>
#include <span>
#include <stdexcept>
#include <string>
#include <variant>
#include <vector>

namespace fer {

struct GrayImage {
  std::size_t width = 0;
  std::size_t height = 0;
  std::vector<std::uint8_t> pixels;  // row-major

  GrayImage() = default;
  GrayImage(std::size_t w, std::size_t h, std::uint8_t fill = 0) : width(w), height(h), pixels(w * h, fill) {}

  std::uint8_t& at(std::size_t x, std::size_t y) { return pixels[y * width + x]; }
  std::uint8_t at(std::size_t x, std::size_t y) const { return pixels[y * width + x]; }
};

struct RgbImage {
  std::size_t width = 0;
  std::size_t height = 0;
  std::vector<std::uint8_t> rgb;  // row-major, interleaved R,G,B

  RgbImage() = default;
  RgbImage(std::size_t w, std::size_t h) : width(w), height(h), rgb(w * h * 3) {}
};

using AnyImage = std::variant<GrayImage, RgbImage>;

inline std::size_t image_width(const AnyImage& im) {
  return std::visit([](const auto& i) { return i.width; }, im);
}
inline std::size_t image_height(const AnyImage& im) {
  return std::visit([](const auto& i) { return i.height; }, im);
}

class ImageFormatError : public std::runtime_error {
 public:
  ImageFormatError(std::size_t offset, const std::string& what)
      : std::runtime_error("byte " + std::to_string(offset) + ": " + what), offset_(offset) {}
  std::size_t offset() const noexcept { return offset_; }

 private:
  std::size_t offset_;
};

namespace detail {

class PnmHeaderReader {
 public:
  explicit PnmHeaderReader(std::span<const std::uint8_t> bytes) : b_(bytes) {}

  void skip_space_and_comments() {
    while (pos_ < b_.size()) {
      if (b_[pos_] == '#') {
        while (pos_ < b_.size() && b_[pos_] != '\n') ++pos_;
      } else if (is_space(b_[pos_])) {
        ++pos_;
      } else {
        break;
      }
    }
  }

  std::size_t number(const char* what) {
    skip_space_and_comments();
    const std::size_t start = pos_;
    std::size_t v = 0;
    while (pos_ < b_.size() && b_[pos_] >= '0' && b_[pos_] <= '9') {
      v = v * 10 + static_cast<std::size_t>(b_[pos_] - '0');
      if (v > 1u << 24) throw ImageFormatError(start, std::string(what) + " too large");
      ++pos_;
    }
    if (pos_ == start) throw ImageFormatError(start, std::string("expected ") + what);
    return v;
  }

  // Exactly one whitespace byte separates maxval from the raster.
  void single_space() {
    if (pos_ >= b_.size() || !is_space(b_[pos_]))
      throw ImageFormatError(pos_, "expected a single whitespace byte before the raster");
    ++pos_;
  }

  std::size_t pos() const { return pos_; }

 private:
  static bool is_space(std::uint8_t c) { return c == ' ' || c == '\t' || c == '\n' || c == '\r' || c == '\v' || c == '\f'; }

  std::span<const std::uint8_t> b_;
  std::size_t pos_ = 2;
};

}  // namespace detail

// Binary PGM (P5) and PPM (P6) with maxval 1..255. Samples above maxval are
// rejected; maxval < 255 is rescaled to the full 8-bit range.
inline AnyImage parse_pnm(std::span<const std::uint8_t> bytes) {
  if (bytes.size() < 2 || bytes[0] != 'P' || (bytes[1] != '5' && bytes[1] != '6'))
    throw ImageFormatError(0, "not a binary PGM (P5) or PPM (P6) file");
  const bool color = bytes[1] == '6';
  detail::PnmHeaderReader h(bytes);
  const std::size_t width = h.number("width");
  const std::size_t height = h.number("height");
  h.skip_space_and_comments();
  const std::size_t maxval_at = h.pos();
  const std::size_t maxval = h.number("maxval");
  if (width == 0 || height == 0) throw ImageFormatError(maxval_at, "zero image dimension");
  if (maxval == 0 || maxval > 255)
    throw ImageFormatError(maxval_at, "maxval " + std::to_string(maxval) + " outside 1..255");
  h.single_space();
  const std::size_t channels = color ? 3 : 1;
  const std::size_t need = width * height * channels;
  const std::size_t start = h.pos();
  if (bytes.size() - start < need)
    throw ImageFormatError(bytes.size(), "raster truncated: need " + std::to_string(need) + " bytes, have " +
                                             std::to_string(bytes.size() - start));
  std::vector<std::uint8_t> raster(bytes.begin() + static_cast<std::ptrdiff_t>(start),
                                   bytes.begin() + static_cast<std::ptrdiff_t>(start + need));
  for (std::size_t i = 0; i < raster.size(); ++i) {
    if (raster[i] > maxval)
      throw ImageFormatError(start + i, "sample " + std::to_string(raster[i]) + " exceeds maxval " + std::to_string(maxval));
    if (maxval != 255) raster[i] = static_cast<std::uint8_t>((raster[i] * 255 + maxval / 2) / maxval);
  }
  if (color) {
    RgbImage im(width, height);
    im.rgb = std::move(raster);
    return im;
  }
  GrayImage im(width, height);
  im.pixels = std::move(raster);
  return im;
}

inline AnyImage read_pnm(const std::filesystem::path& path) {
  std::ifstream in(path, std::ios::binary);
  if (!in) throw std::runtime_error("cannot open image " + path.string());
  std::vector<std::uint8_t> bytes((std::istreambuf_iterator<char>(in)), std::istreambuf_iterator<char>());
  return parse_pnm(bytes);
}

inline void write_pgm(std::ostream& os, const GrayImage& im) {
  os << "P5\n" << im.width << ' ' << im.height << "\n255\n";
  os.write(reinterpret_cast<const char*>(im.pixels.data()), static_cast<std::streamsize>(im.pixels.size()));
}

inline void write_ppm(std::ostream& os, const RgbImage& im) {
  os << "P6\n" << im.width << ' ' << im.height << "\n255\n";
  os.write(reinterpret_cast<const char*>(im.rgb.data()), static_cast<std::streamsize>(im.rgb.size()));
}

inline double luma(std::uint8_t r, std::uint8_t g, std::uint8_t b) {
  return 0.299 * r + 0.587 * g + 0.114 * b;
}

inline GrayImage to_gray(const AnyImage& image) {
  if (const auto* g = std::get_if<GrayImage>(&image)) return *g;
  const auto& c = std::get<RgbImage>(image);
  GrayImage out(c.width, c.height);
  for (std::size_t i = 0; i < out.pixels.size(); ++i)
    out.pixels[i] = static_cast<std::uint8_t>(
        std::clamp(std::lround(luma(c.rgb[3 * i], c.rgb[3 * i + 1], c.rgb[3 * i + 2])), 0L, 255L));
  return out;
}

// Bilinear resampling with pixel-center alignment and edge clamping.
inline std::vector<double> bilinear_resize(std::span<const double> src, std::size_t sw, std::size_t sh,
                                           std::size_t dw, std::size_t dh) {
  if (src.size() != sw * sh || sw == 0 || sh == 0 || dw == 0 || dh == 0)
    throw std::invalid_argument("bilinear_resize: bad dimensions");
  std::vector<double> out(dw * dh);
  const double sx = static_cast<double>(sw) / static_cast<double>(dw);
  const double sy = static_cast<double>(sh) / static_cast<double>(dh);
  for (std::size_t y = 0; y < dh; ++y) {
    const double fy = std::clamp((static_cast<double>(y) + 0.5) * sy - 0.5, 0.0, static_cast<double>(sh - 1));
    const auto y0 = static_cast<std::size_t>(fy);
    const std::size_t y1 = std::min(y0 + 1, sh - 1);
    const double wy = fy - static_cast<double>(y0);
    for (std::size_t x = 0; x < dw; ++x) {
      const double fx = std::clamp((static_cast<double>(x) + 0.5) * sx - 0.5, 0.0, static_cast<double>(sw - 1));
      const auto x0 = static_cast<std::size_t>(fx);
      const std::size_t x1 = std::min(x0 + 1, sw - 1);
      const double wx = fx - static_cast<double>(x0);
      // a + (b - a) * w reproduces constant regions exactly.
      const double top = src[y0 * sw + x0] + (src[y0 * sw + x1] - src[y0 * sw + x0]) * wx;
      const double bottom = src[y1 * sw + x0] + (src[y1 * sw + x1] - src[y1 * sw + x0]) * wx;
      out[y * dw + x] = top + (bottom - top) * wy;
    }
  }
  return out;
}

}  // namespace fer
