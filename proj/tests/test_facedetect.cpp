#include <gtest/gtest.h>

#include <limits>
#include <random>

#include "fer_forge/facedetect.hpp"

using namespace fer;

namespace {

constexpr double kInf = std::numeric_limits<double>::infinity();

// One stage, one stump: top half darker than bottom half.
CascadeModel dark_over_light() {
  CascadeModel m;
  HaarStump s;
  s.rects = {{0, 0, 24, 12, 1.0}, {0, 12, 24, 12, -1.0}};
  s.threshold = -0.1;
  s.left_value = 1.0;
  s.right_value = 0.0;
  m.stages.push_back({0.5, {s}});
  return m;
}

CascadeModel accept_all() {
  CascadeModel m;
  m.stages.push_back({-kInf, {}});
  return m;
}

GrayImage halves(std::size_t w, std::size_t h, std::uint8_t top, std::uint8_t bottom) {
  GrayImage g(w, h);
  for (std::size_t y = 0; y < h; ++y)
    for (std::size_t x = 0; x < w; ++x) g.at(x, y) = y < h / 2 ? top : bottom;
  return g;
}

GrayImage noise(std::size_t w, std::size_t h, std::uint64_t seed, int hi) {
  std::mt19937_64 rng(seed);
  GrayImage g(w, h);
  for (auto& p : g.pixels) p = static_cast<std::uint8_t>(rng() % static_cast<std::uint64_t>(hi + 1));
  return g;
}

}  // namespace

TEST(IntegralImage, OnesExample) {
  const GrayImage g(2, 2, 1);
  const IntegralImage ii(g);
  EXPECT_EQ(ii.at(2, 2), 4);
  EXPECT_EQ(ii.at(1, 1), 1);
  EXPECT_EQ(ii.at(0, 2), 0);
  EXPECT_EQ(ii.rect_sum(1, 0, 1, 2), 2);
  EXPECT_THROW(IntegralImage(GrayImage{}), std::invalid_argument);
}

TEST(IntegralImage, RectSumsMatchBruteForce) {
  const auto g = noise(31, 17, 5, 255);
  const IntegralImage ii(g);
  std::mt19937_64 rng(6);
  for (int t = 0; t < 100; ++t) {
    const std::size_t x = rng() % 31, y = rng() % 17;
    const std::size_t w = 1 + rng() % (31 - x), h = 1 + rng() % (17 - y);
    std::int64_t sum = 0, sq = 0;
    for (std::size_t yy = y; yy < y + h; ++yy)
      for (std::size_t xx = x; xx < x + w; ++xx) {
        sum += g.at(xx, yy);
        sq += static_cast<std::int64_t>(g.at(xx, yy)) * g.at(xx, yy);
      }
    EXPECT_EQ(ii.rect_sum(x, y, w, h), sum);
    EXPECT_EQ(ii.rect_sq_sum(x, y, w, h), sq);
  }
}

TEST(Cascade, AcceptAllOnBaseWindowGivesOneHit) {
  const auto g = noise(24, 24, 1, 255);
  std::vector<Detection> raw;
  const auto dets = detect(accept_all(), g, {.min_neighbors = 1}, &raw);
  ASSERT_EQ(raw.size(), 1u);
  EXPECT_EQ(raw[0], (Detection{0, 0, 24, 24, 1}));
  ASSERT_EQ(dets.size(), 1u);
  EXPECT_EQ(dets[0].w, 24);
}

TEST(Cascade, RejectingStageShortCircuits) {
  auto m = dark_over_light();
  m.stages.insert(m.stages.begin(), CascadeStage{kInf, {m.stages[0].stumps[0]}});
  m.stages.push_back(m.stages[1]);
  const IntegralImage ii(halves(24, 24, 0, 255));
  EvalStats stats;
  EXPECT_FALSE(eval_window(m, ii, 0, 0, 1.0, &stats));
  EXPECT_EQ(stats.stages_evaluated, 1u);
  EXPECT_EQ(stats.stumps_evaluated, 1u);
}

TEST(Cascade, DarkOverLightStump) {
  const auto m = dark_over_light();
  EXPECT_TRUE(eval_window(m, IntegralImage(halves(24, 24, 10, 200)), 0, 0, 1.0));
  EXPECT_FALSE(eval_window(m, IntegralImage(halves(24, 24, 200, 10)), 0, 0, 1.0));
  EXPECT_TRUE(eval_window(m, IntegralImage(halves(48, 48, 10, 200)), 0, 0, 2.0));
  EXPECT_THROW(eval_window(m, IntegralImage(halves(24, 24, 10, 200)), 1, 0, 1.0), std::out_of_range);
}

TEST(Cascade, BlankImageHasNoFaces) {
  const GrayImage blank(64, 64, 128);
  EXPECT_TRUE(detect(dark_over_light(), blank, {.min_neighbors = 1}).empty());
}

TEST(Cascade, AffineIntensityInvariance) {
  const auto m = dark_over_light();
  const auto g = noise(40, 40, 9, 100);
  GrayImage brighter = g;
  for (auto& p : brighter.pixels) p = static_cast<std::uint8_t>(2 * p + 30);
  std::vector<Detection> a, b;
  detect(m, g, {.min_neighbors = 1}, &a);
  detect(m, brighter, {.min_neighbors = 1}, &b);
  EXPECT_EQ(a, b);
}

TEST(Cascade, SmallImageWarnsAndReturnsNothing) {
  EXPECT_TRUE(detect(accept_all(), GrayImage(10, 30, 5)).empty());
  EXPECT_THROW(detect(accept_all(), GrayImage(30, 30, 5), {.scale_factor = 1.0}), std::invalid_argument);
}

TEST(Grouping, MinNeighborsIsMonotone) {
  const auto g = noise(60, 50, 4, 255);
  std::vector<Detection> raw;
  detect(accept_all(), g, {.scale_factor = 1.25, .min_neighbors = 1}, &raw);
  ASSERT_FALSE(raw.empty());
  std::size_t prev = std::numeric_limits<std::size_t>::max();
  for (std::size_t k = 0; k < 40; ++k) {
    const auto grouped = group_detections(raw, k);
    EXPECT_LE(grouped.size(), prev);
    prev = grouped.size();
    for (const auto& d : grouped) EXPECT_GE(d.neighbors, std::max<std::size_t>(1, k));
  }
}

TEST(Grouping, MergesOverlappingBoxes) {
  const std::vector<Detection> hits{{0, 0, 10, 10, 1}, {2, 0, 10, 10, 1}, {50, 50, 10, 10, 1}};
  const auto g = group_detections(hits, 2);
  ASSERT_EQ(g.size(), 1u);
  EXPECT_EQ(g[0], (Detection{1, 0, 10, 10, 2}));
  EXPECT_EQ(group_detections(hits, 1).size(), 2u);
  EXPECT_DOUBLE_EQ(overlap_ratio(hits[0], hits[1]), 0.8);
  EXPECT_EQ(overlap_ratio(hits[0], hits[2]), 0.0);
}

TEST(CascadeJson, RoundTripAndInfinities) {
  auto m = dark_over_light();
  m.stages.push_back({-kInf, {}});
  const auto back = parse_cascade(cascade_to_json(m));
  EXPECT_EQ(cascade_to_json(back), cascade_to_json(m));
  EXPECT_EQ(back.stages[1].threshold, -kInf);
  EXPECT_EQ(back.stages[0].stumps[0].rects[1].weight, -1.0);
}

TEST(CascadeJson, ValidationErrors) {
  EXPECT_THROW(parse_cascade("{"), CascadeFormatError);
  EXPECT_THROW(parse_cascade(R"({"window":[24,24]})"), CascadeFormatError);
  EXPECT_THROW(parse_cascade(R"({"window":[24,24],"stages":[{"threshold":0,"stumps":[
      {"rects":[[0,0,30,12,1],[0,12,24,12,-1]],"threshold":0,"left":1,"right":0}]}]})"),
               CascadeFormatError);
  EXPECT_THROW(parse_cascade(R"({"window":[24,24],"stages":[{"threshold":0,"stumps":[
      {"rects":[[0,0,24,12,1],[0,12,24,12,-2]],"threshold":0,"left":1,"right":0}]}]})"),
               CascadeFormatError);
  EXPECT_THROW(parse_cascade(R"({"window":[24,24],"stages":[{"threshold":"nan","stumps":[]}]})"),
               CascadeFormatError);
}

TEST(PreprocessFace, ShapeAndRange) {
  const auto g = noise(100, 80, 2, 255);
  const auto t = preprocess_face(AnyImage{g}, {10, 5, 60, 70, 1});
  EXPECT_EQ(t.shape(), (Shape{1, 48, 48}));
  for (float v : t.data()) {
    EXPECT_GE(v, 0.0f);
    EXPECT_LE(v, 1.0f);
  }
  RgbImage c(30, 30);
  for (auto& v : c.rgb) v = 255;
  const auto white = preprocess_face(AnyImage{c}, {0, 0, 30, 30, 1});
  for (float v : white.data()) EXPECT_NEAR(v, 1.0f, 1e-6);
  EXPECT_THROW(preprocess_face(AnyImage{g}, {90, 0, 20, 20, 1}), std::invalid_argument);
  EXPECT_THROW(preprocess_face(AnyImage{g}, {0, 0, 0, 20, 1}), std::invalid_argument);
}
