#pragma once

#include <algorithm>
#include <cmath>
#include <cstdint>
#include <filesystem>
#include <fstream>
#include <iostream>
#include <limits>
#include <sstream>
#include <stdexcept>
#include <string>
#include <string_view>
#include <vector>

#include <json.hpp>

#include "fer_forge/image.hpp"
#include "fer_forge/models.hpp"
#include "fer_forge/tensor.hpp"

namespace fer {

// (H+1) x (W+1) cumulative sums; entry (y, x) holds the sum of all pixels in
// rows < y and columns < x. A second table holds sums of squared pixels.
class IntegralImage {
 public:
  explicit IntegralImage(const GrayImage& gray)
      : width_(gray.width), height_(gray.height), sum_((gray.width + 1) * (gray.height + 1), 0),
        sq_(sum_.size(), 0) {
    if (gray.width == 0 || gray.height == 0) throw std::invalid_argument("integral image of an empty image");
    const std::size_t stride = width_ + 1;
    for (std::size_t y = 0; y < height_; ++y) {
      std::int64_t row = 0, row_sq = 0;
      for (std::size_t x = 0; x < width_; ++x) {
        const std::int64_t v = gray.at(x, y);
        row += v;
        row_sq += v * v;
        sum_[(y + 1) * stride + x + 1] = sum_[y * stride + x + 1] + row;
        sq_[(y + 1) * stride + x + 1] = sq_[y * stride + x + 1] + row_sq;
      }
    }
  }

  std::size_t width() const { return width_; }
  std::size_t height() const { return height_; }

  std::int64_t at(std::size_t y, std::size_t x) const { return sum_[y * (width_ + 1) + x]; }

  std::int64_t rect_sum(std::size_t x, std::size_t y, std::size_t w, std::size_t h) const {
    return corner_sum(sum_, x, y, w, h);
  }
  std::int64_t rect_sq_sum(std::size_t x, std::size_t y, std::size_t w, std::size_t h) const {
    return corner_sum(sq_, x, y, w, h);
  }

 private:
  std::int64_t corner_sum(const std::vector<std::int64_t>& t, std::size_t x, std::size_t y, std::size_t w,
                          std::size_t h) const {
    const std::size_t s = width_ + 1;
    return t[(y + h) * s + x + w] - t[y * s + x + w] - t[(y + h) * s + x] + t[y * s + x];
  }

  std::size_t width_, height_;
  std::vector<std::int64_t> sum_;
  std::vector<std::int64_t> sq_;
};

struct HaarRect {
  int x = 0, y = 0, w = 0, h = 0;
  double weight = 0.0;
};

struct HaarStump {
  std::vector<HaarRect> rects;  // 2 or 3
  double threshold = 0.0;
  double left_value = 0.0;   // feature below threshold
  double right_value = 0.0;  // otherwise
};

struct CascadeStage {
  double threshold = 0.0;
  std::vector<HaarStump> stumps;
};

class CascadeFormatError : public std::runtime_error {
 public:
  using std::runtime_error::runtime_error;
};

struct CascadeModel {
  std::size_t window_w = 24;
  std::size_t window_h = 24;
  std::vector<CascadeStage> stages;

  void validate() const {
    if (window_w == 0 || window_h == 0) throw CascadeFormatError("cascade window must be non-empty");
    for (std::size_t s = 0; s < stages.size(); ++s)
      for (std::size_t k = 0; k < stages[s].stumps.size(); ++k) {
        const auto& stump = stages[s].stumps[k];
        const std::string where = "stage " + std::to_string(s) + " stump " + std::to_string(k);
        if (stump.rects.empty() || stump.rects.size() > 3)
          throw CascadeFormatError(where + ": needs 1 to 3 rectangles");
        double balance = 0.0, magnitude = 0.0;
        for (const auto& r : stump.rects) {
          if (r.x < 0 || r.y < 0 || r.w <= 0 || r.h <= 0 || static_cast<std::size_t>(r.x + r.w) > window_w ||
              static_cast<std::size_t>(r.y + r.h) > window_h)
            throw CascadeFormatError(where + ": rectangle outside the base window");
          balance += r.weight * r.w * r.h;
          magnitude += std::abs(r.weight * r.w * r.h);
        }
        if (std::abs(balance) > 1e-9 * std::max(1.0, magnitude))
          throw CascadeFormatError(where + ": rectangle weights do not cancel over a uniform window");
      }
  }
};

namespace detail {

inline double json_real(const nlohmann::json& j, const char* what) {
  if (j.is_number()) return j.get<double>();
  if (j.is_string()) {
    const auto s = j.get<std::string>();
    if (s == "inf" || s == "+inf") return std::numeric_limits<double>::infinity();
    if (s == "-inf") return -std::numeric_limits<double>::infinity();
  }
  throw CascadeFormatError(std::string(what) + " must be a number, \"inf\" or \"-inf\"");
}

inline nlohmann::json real_json(double v) {
  if (std::isinf(v)) return v > 0 ? "inf" : "-inf";
  return v;
}

}  // namespace detail

// Cascade text format (JSON):
//   { "window": [w, h],
//     "stages": [ { "threshold": t,
//                   "stumps": [ { "rects": [[x, y, w, h, weight], ...],
//                                 "threshold": t, "left": a, "right": b } ] } ] }
// Thresholds may be the strings "inf" / "-inf".
inline CascadeModel parse_cascade(std::string_view text) {
  nlohmann::json j;
  try {
    j = nlohmann::json::parse(text);
  } catch (const nlohmann::json::parse_error& e) {
    throw CascadeFormatError(std::string("cascade is not valid JSON: ") + e.what());
  }
  CascadeModel m;
  try {
    const auto& win = j.at("window");
    if (!win.is_array() || win.size() != 2) throw CascadeFormatError("window must be [w, h]");
    m.window_w = win[0].get<std::size_t>();
    m.window_h = win[1].get<std::size_t>();
    for (const auto& js : j.at("stages")) {
      CascadeStage stage;
      stage.threshold = detail::json_real(js.at("threshold"), "stage threshold");
      for (const auto& jk : js.at("stumps")) {
        HaarStump stump;
        for (const auto& jr : jk.at("rects")) {
          if (!jr.is_array() || jr.size() != 5) throw CascadeFormatError("rect must be [x, y, w, h, weight]");
          stump.rects.push_back({jr[0].get<int>(), jr[1].get<int>(), jr[2].get<int>(), jr[3].get<int>(),
                                 jr[4].get<double>()});
        }
        stump.threshold = detail::json_real(jk.at("threshold"), "stump threshold");
        stump.left_value = jk.at("left").get<double>();
        stump.right_value = jk.at("right").get<double>();
        stage.stumps.push_back(std::move(stump));
      }
      m.stages.push_back(std::move(stage));
    }
  } catch (const nlohmann::json::exception& e) {
    throw CascadeFormatError(std::string("malformed cascade: ") + e.what());
  }
  m.validate();
  return m;
}

inline CascadeModel load_cascade(const std::filesystem::path& path) {
  std::ifstream in(path);
  if (!in) throw std::runtime_error("cannot open cascade " + path.string());
  std::stringstream ss;
  ss << in.rdbuf();
  return parse_cascade(ss.str());
}

inline std::string cascade_to_json(const CascadeModel& m) {
  nlohmann::json j;
  j["window"] = {m.window_w, m.window_h};
  j["stages"] = nlohmann::json::array();
  for (const auto& s : m.stages) {
    nlohmann::json js;
    js["threshold"] = detail::real_json(s.threshold);
    js["stumps"] = nlohmann::json::array();
    for (const auto& k : s.stumps) {
      nlohmann::json jk;
      jk["rects"] = nlohmann::json::array();
      for (const auto& r : k.rects) jk["rects"].push_back({r.x, r.y, r.w, r.h, r.weight});
      jk["threshold"] = detail::real_json(k.threshold);
      jk["left"] = k.left_value;
      jk["right"] = k.right_value;
      js["stumps"].push_back(jk);
    }
    j["stages"].push_back(js);
  }
  return j.dump(2);
}

// A cascade with rectangles resized for one scan scale. The first rectangle's
// weight is re-balanced so the weighted areas still cancel after rounding.
struct ScaledCascade {
  const CascadeModel* model = nullptr;
  std::size_t window_w = 0, window_h = 0;
  std::vector<std::vector<std::vector<HaarRect>>> rects;  // [stage][stump][rect]

  ScaledCascade(const CascadeModel& m, double scale) : model(&m) {
    window_w = static_cast<std::size_t>(std::lround(static_cast<double>(m.window_w) * scale));
    window_h = static_cast<std::size_t>(std::lround(static_cast<double>(m.window_h) * scale));
    for (const auto& stage : m.stages) {
      auto& sr = rects.emplace_back();
      for (const auto& stump : stage.stumps) {
        auto& out = sr.emplace_back();
        for (const auto& r : stump.rects) {
          HaarRect s = r;
          s.x = static_cast<int>(std::lround(r.x * scale));
          s.y = static_cast<int>(std::lround(r.y * scale));
          s.w = std::max(1, static_cast<int>(std::lround(r.w * scale)));
          s.h = std::max(1, static_cast<int>(std::lround(r.h * scale)));
          s.w = std::min<int>(s.w, static_cast<int>(window_w) - s.x);
          s.h = std::min<int>(s.h, static_cast<int>(window_h) - s.y);
          out.push_back(s);
        }
        if (out.size() > 1 && out[0].w > 0 && out[0].h > 0) {
          double rest = 0.0;
          for (std::size_t i = 1; i < out.size(); ++i) rest += out[i].weight * out[i].w * out[i].h;
          out[0].weight = -rest / (out[0].w * out[0].h);
        }
      }
    }
  }
};

struct EvalStats {
  std::size_t stages_evaluated = 0;
  std::size_t stumps_evaluated = 0;
};

inline constexpr double kMinWindowStdDev = 1.0;

// Evaluates stages in order and stops at the first stage whose summed stump
// outputs fall below the stage threshold.
inline bool eval_window(const ScaledCascade& sc, const IntegralImage& ii, std::size_t x, std::size_t y,
                        EvalStats* stats = nullptr) {
  const double area = static_cast<double>(sc.window_w * sc.window_h);
  const double mean = static_cast<double>(ii.rect_sum(x, y, sc.window_w, sc.window_h)) / area;
  const double var = static_cast<double>(ii.rect_sq_sum(x, y, sc.window_w, sc.window_h)) / area - mean * mean;
  const double norm = std::max(kMinWindowStdDev, std::sqrt(std::max(0.0, var)));
  const auto& stages = sc.model->stages;
  for (std::size_t s = 0; s < stages.size(); ++s) {
    if (stats) ++stats->stages_evaluated;
    double total = 0.0;
    for (std::size_t k = 0; k < stages[s].stumps.size(); ++k) {
      if (stats) ++stats->stumps_evaluated;
      const auto& stump = stages[s].stumps[k];
      double feature = 0.0;
      for (const auto& r : sc.rects[s][k])
        feature += r.weight * static_cast<double>(ii.rect_sum(x + static_cast<std::size_t>(r.x),
                                                              y + static_cast<std::size_t>(r.y),
                                                              static_cast<std::size_t>(r.w),
                                                              static_cast<std::size_t>(r.h)));
      feature /= area;
      total += feature < stump.threshold * norm ? stump.left_value : stump.right_value;
    }
    if (!(total >= stages[s].threshold)) return false;
  }
  return true;
}

inline bool eval_window(const CascadeModel& cascade, const IntegralImage& ii, std::size_t x, std::size_t y,
                        double scale, EvalStats* stats = nullptr) {
  const ScaledCascade sc(cascade, scale);
  if (sc.window_w == 0 || sc.window_h == 0 || x + sc.window_w > ii.width() || y + sc.window_h > ii.height())
    throw std::out_of_range("scaled window does not fit in the image");
  return eval_window(sc, ii, x, y, stats);
}

struct Detection {
  int x = 0, y = 0, w = 0, h = 0;
  std::size_t neighbors = 0;

  friend bool operator==(const Detection&, const Detection&) = default;
};

struct DetectOptions {
  double scale_factor = 1.1;
  std::size_t min_neighbors = 3;
  std::size_t min_w = 0;
  std::size_t min_h = 0;
};

// Intersection over the smaller box's area.
inline double overlap_ratio(const Detection& a, const Detection& b) {
  const int ix = std::max(0, std::min(a.x + a.w, b.x + b.w) - std::max(a.x, b.x));
  const int iy = std::max(0, std::min(a.y + a.h, b.y + b.h) - std::max(a.y, b.y));
  const double min_area = std::min(static_cast<double>(a.w) * a.h, static_cast<double>(b.w) * b.h);
  return min_area > 0 ? static_cast<double>(ix) * iy / min_area : 0.0;
}

// Greedy clustering in hit order: a hit joins the first cluster whose seed box
// overlaps it by >= 0.5, otherwise it seeds a new cluster.
inline std::vector<Detection> group_detections(const std::vector<Detection>& hits, std::size_t min_neighbors) {
  struct Cluster {
    Detection seed;
    double sx = 0, sy = 0, sw = 0, sh = 0;
    std::size_t n = 0;
  };
  std::vector<Cluster> clusters;
  for (const auto& h : hits) {
    Cluster* target = nullptr;
    for (auto& c : clusters)
      if (overlap_ratio(c.seed, h) >= 0.5) {
        target = &c;
        break;
      }
    if (!target) {
      clusters.push_back({h});
      target = &clusters.back();
    }
    target->sx += h.x;
    target->sy += h.y;
    target->sw += h.w;
    target->sh += h.h;
    ++target->n;
  }
  std::vector<Detection> out;
  const std::size_t keep = std::max<std::size_t>(1, min_neighbors);
  for (const auto& c : clusters) {
    if (c.n < keep) continue;
    const double n = static_cast<double>(c.n);
    out.push_back({static_cast<int>(std::lround(c.sx / n)), static_cast<int>(std::lround(c.sy / n)),
                   static_cast<int>(std::lround(c.sw / n)), static_cast<int>(std::lround(c.sh / n)), c.n});
  }
  return out;
}

// Multi-scale sliding-window scan. Raw hits come out in (scale, y, x) order.
inline std::vector<Detection> detect(const CascadeModel& cascade, const GrayImage& gray, const DetectOptions& opt = {},
                                     std::vector<Detection>* raw_hits = nullptr) {
  if (!(opt.scale_factor > 1.0)) throw std::invalid_argument("scale factor must be > 1");
  if (gray.width < cascade.window_w || gray.height < cascade.window_h) {
    std::clog << "warning: image " << gray.width << "x" << gray.height << " is smaller than the "
              << cascade.window_w << "x" << cascade.window_h << " cascade window\n";
    return {};
  }
  const IntegralImage ii(gray);
  std::vector<Detection> hits;
  for (double scale = 1.0;; scale *= opt.scale_factor) {
    const ScaledCascade sc(cascade, scale);
    if (sc.window_w > gray.width || sc.window_h > gray.height) break;
    if (sc.window_w < opt.min_w || sc.window_h < opt.min_h) continue;
    const auto step = static_cast<std::size_t>(std::max(1L, std::lround(scale)));
    for (std::size_t y = 0; y + sc.window_h <= gray.height; y += step)
      for (std::size_t x = 0; x + sc.window_w <= gray.width; x += step)
        if (eval_window(sc, ii, x, y))
          hits.push_back({static_cast<int>(x), static_cast<int>(y), static_cast<int>(sc.window_w),
                          static_cast<int>(sc.window_h), 1});
  }
  if (raw_hits) *raw_hits = hits;
  return group_detections(hits, opt.min_neighbors);
}

inline void write_detections_csv(std::ostream& os, const std::vector<Detection>& dets) {
  os << "x,y,w,h,neighbors\n";
  for (const auto& d : dets) os << d.x << ',' << d.y << ',' << d.w << ',' << d.h << ',' << d.neighbors << '\n';
}

// Crop, convert to luma, bilinear-resize to 48x48 and scale to [0,1]: the
// same representation the networks are trained on.
inline Tensor<float> preprocess_face(const AnyImage& image, const Detection& box) {
  const std::size_t iw = image_width(image), ih = image_height(image);
  if (box.w <= 0 || box.h <= 0 || box.x < 0 || box.y < 0 || static_cast<std::size_t>(box.x + box.w) > iw ||
      static_cast<std::size_t>(box.y + box.h) > ih)
    throw std::invalid_argument("degenerate face box " + std::to_string(box.x) + "," + std::to_string(box.y) + "," +
                                std::to_string(box.w) + "," + std::to_string(box.h));
  const auto w = static_cast<std::size_t>(box.w), h = static_cast<std::size_t>(box.h);
  std::vector<double> crop(w * h);
  for (std::size_t y = 0; y < h; ++y)
    for (std::size_t x = 0; x < w; ++x) {
      const std::size_t sx = static_cast<std::size_t>(box.x) + x, sy = static_cast<std::size_t>(box.y) + y;
      if (const auto* g = std::get_if<GrayImage>(&image)) {
        crop[y * w + x] = g->at(sx, sy);
      } else {
        const auto& c = std::get<RgbImage>(image);
        const std::size_t i = 3 * (sy * c.width + sx);
        crop[y * w + x] = luma(c.rgb[i], c.rgb[i + 1], c.rgb[i + 2]);
      }
    }
  const auto resized = bilinear_resize(crop, w, h, kImageSide, kImageSide);
  Tensor<float> out({1, kImageSide, kImageSide});
  for (std::size_t i = 0; i < resized.size(); ++i)
    out[i] = static_cast<float>(std::clamp(resized[i] / 255.0, 0.0, 1.0));
  return out;
}

}  // namespace fer
