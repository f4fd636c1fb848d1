#include <gtest/gtest.h>

#include "fer_forge/manifest.hpp"

using namespace fer;

TEST(Manifest, ParsesKeysAndComments) {
  const auto m = parse_manifest(R"(# run
models = proposed_cnn tree
data = /tmp/fer.csv   # trailing comment
optimizer = rmsprop
lr = 0.0005
decay = 1e-6
batch = 64
epochs = 24
seed = 7
strict_epoch_eval = true
early_stopping = no
monitor = test
min_samples_split = 10
)");
  EXPECT_EQ(m.models, (std::vector<std::string>{"proposed_cnn", "tree"}));
  EXPECT_EQ(m.data, "/tmp/fer.csv");
  EXPECT_EQ(m.optimizer, OptimizerKind::kRmsProp);
  EXPECT_EQ(m.learning_rate, 0.0005);
  EXPECT_EQ(m.decay, 1e-6);
  EXPECT_EQ(m.batch, 64u);
  EXPECT_EQ(m.epochs, 24u);
  EXPECT_EQ(m.seed, 7u);
  EXPECT_EQ(m.strict_epoch_eval, true);
  EXPECT_EQ(m.early_stopping, false);
  EXPECT_EQ(m.monitor, Monitor::kTest);
  EXPECT_EQ(m.min_samples_split, 10u);
  EXPECT_FALSE(m.out.has_value());
  EXPECT_TRUE(m.grid.empty());
}

TEST(Manifest, GridCells) {
  const auto m = parse_manifest("cell = adam 128 20 0.0001 1e-6\ncell = sgd 64 10 default 0\n");
  ASSERT_EQ(m.grid.size(), 2u);
  EXPECT_EQ(m.grid[0].optimizer, OptimizerKind::kAdam);
  EXPECT_EQ(m.grid[0].batch, 128u);
  EXPECT_EQ(m.grid[0].epochs, 20u);
  EXPECT_EQ(m.grid[0].optimizer_config().learning_rate, 0.0001);
  EXPECT_EQ(m.grid[0].optimizer_config().decay, 1e-6);
  EXPECT_FALSE(m.grid[1].learning_rate.has_value());
  EXPECT_EQ(m.grid[1].optimizer_config().learning_rate, OptimizerConfig::defaults(OptimizerKind::kSgd).learning_rate);
}

TEST(Manifest, RejectsBadLinesWithLineNumbers) {
  auto line_of = [](const char* text) -> std::string {
    try {
      parse_manifest(text);
    } catch (const ManifestError& e) {
      return e.what();
    }
    return "";
  };
  EXPECT_NE(line_of("batch = 4\nlearning_rate = 0.1\n").find("line 2"), std::string::npos);
  EXPECT_NE(line_of("model = resnet\n").find("unknown model"), std::string::npos);
  EXPECT_NE(line_of("batch = many\n").find("line 1"), std::string::npos);
  EXPECT_NE(line_of("optimizer = lbfgs\n").find("unknown optimizer"), std::string::npos);
  EXPECT_NE(line_of("cell = adam 0 1 default 0\n").find("batch"), std::string::npos);
  EXPECT_NE(line_of("cell = adam 1 1\n").find("cell needs"), std::string::npos);
  EXPECT_NE(line_of("just words\n").find("key = value"), std::string::npos);
  EXPECT_NE(line_of("monitor = val\n").find("monitor"), std::string::npos);
}

TEST(Manifest, MissingFileThrows) { EXPECT_THROW(load_manifest("/nonexistent/run.manifest"), std::runtime_error); }
