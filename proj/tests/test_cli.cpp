#include <gtest/gtest.h>

#include <sys/wait.h>

#include <cstdio>
#include <filesystem>
#include <fstream>
#include <sstream>

#include "fer_forge/facedetect.hpp"
#include "fer_forge/synthetic.hpp"

using namespace fer;
namespace fs = std::filesystem;

namespace {

struct Run {
  int code = -1;
  std::string out;
};

Run run(const std::string& args) {
  const std::string cmd = std::string(FER_FORGE_CLI) + " " + args + " 2>/dev/null";
  Run r;
  FILE* p = popen(cmd.c_str(), "r");
  if (!p) return r;
  char buf[4096];
  std::size_t n = 0;
  while ((n = fread(buf, 1, sizeof buf, p)) > 0) r.out.append(buf, n);
  const int status = pclose(p);
  r.code = WIFEXITED(status) ? WEXITSTATUS(status) : -1;
  return r;
}

std::string slurp(const fs::path& p) {
  std::ifstream in(p);
  std::stringstream ss;
  ss << in.rdbuf();
  return ss.str();
}

std::vector<std::string> lines(const std::string& s) {
  std::vector<std::string> out;
  std::istringstream in(s);
  for (std::string l; std::getline(in, l);) out.push_back(l);
  return out;
}

class CliTest : public ::testing::Test {
 protected:
  static void SetUpTestSuite() {
    dir_ = fs::temp_directory_path() / "fer_forge_cli_test";
    fs::remove_all(dir_);
    fs::create_directories(dir_);
    auto recs = synthetic_records(28, 77);
    for (std::size_t i = 21; i < recs.size(); ++i) recs[i].usage = Usage::kPublicTest;
    std::ofstream csv(dir_ / "tiny.csv");
    write_fer_csv(csv, recs);
    GrayImage face(60, 60);
    for (std::size_t i = 0; i < face.pixels.size(); ++i) face.pixels[i] = static_cast<std::uint8_t>((i * 31) % 251);
    std::ofstream pgm(dir_ / "face.pgm", std::ios::binary);
    write_pgm(pgm, face);
    GrayImage window(24, 24, 90);
    std::ofstream win(dir_ / "window.pgm", std::ios::binary);
    write_pgm(win, window);
  }

  static fs::path dir_;
  static std::string data() { return (dir_ / "tiny.csv").string(); }
};

fs::path CliTest::dir_;

}  // namespace

TEST_F(CliTest, MissingDatasetIsUsageErrorWithoutOutputs) {
  const auto out = dir_ / "missing_run";
  const auto r = run("train --model ffnn --data " + (dir_ / "nope.csv").string() + " --out " + out.string());
  EXPECT_EQ(r.code, 2);
  EXPECT_FALSE(fs::exists(out));
}

TEST_F(CliTest, BadArgumentsAreUsageErrors) {
  EXPECT_EQ(run("train --model resnet --data " + data()).code, 2);
  EXPECT_EQ(run("frobnicate").code, 2);
  EXPECT_EQ(run("train --model ffnn --optimizer lbfgs --data " + data()).code, 2);
  EXPECT_EQ(run("predict --model " + (dir_ / "absent.femo").string() + " --image " + (dir_ / "face.pgm").string()).code,
            2);
}

TEST_F(CliTest, TrainWritesArtifactsAndEvalAgrees) {
  const auto out = dir_ / "train_run";
  const auto r = run("train --model ffnn --data " + data() + " --epochs 1 --batch 7 --out " + out.string());
  ASSERT_EQ(r.code, 0);
  for (auto f : {"model.femo", "epochs.csv", "confusion.csv", "confusion_rates.csv", "confusion.txt"})
    EXPECT_TRUE(fs::exists(out / f)) << f;
  EXPECT_EQ(lines(slurp(out / "epochs.csv")).size(), 2u);
  ASSERT_EQ(r.out.rfind("test_accuracy ", 0), 0u);
  const auto ev = run("eval --model " + (out / "model.femo").string() + " --data " + data());
  ASSERT_EQ(ev.code, 0);
  EXPECT_EQ(lines(ev.out)[0], lines(r.out)[0]);
}

TEST_F(CliTest, TreeTrainAndEval) {
  const auto out = dir_ / "tree_run";
  const auto r = run("train --model tree --min-samples-split 2 --data " + data() + " --out " + out.string());
  ASSERT_EQ(r.code, 0);
  ASSERT_TRUE(fs::exists(out / "model.tree"));
  const auto ev = run("eval --model " + (out / "model.tree").string() + " --data " + data());
  EXPECT_EQ(ev.code, 0);
  EXPECT_EQ(lines(ev.out)[0], lines(r.out)[0]);
}

TEST_F(CliTest, EmptySweepWritesHeaderOnly) {
  const auto manifest = dir_ / "empty.manifest";
  std::ofstream(manifest) << "models = ffnn\n";
  const auto out = dir_ / "empty_sweep";
  ASSERT_EQ(run("sweep --manifest " + manifest.string() + " --out " + out.string()).code, 0);
  EXPECT_EQ(lines(slurp(out / "hyperparameters.csv")).size(), 1u);
}

TEST_F(CliTest, SingleCellSweepMatchesTrain) {
  const auto manifest = dir_ / "one.manifest";
  std::ofstream(manifest) << "models = ffnn\ndata = " << data() << "\ncell = sgd 7 1 default 0\n";
  const auto out = dir_ / "one_sweep";
  ASSERT_EQ(run("sweep --manifest " + manifest.string() + " --out " + out.string()).code, 0);
  const auto rows = lines(slurp(out / "hyperparameters.csv"));
  ASSERT_EQ(rows.size(), 2u);
  EXPECT_NE(rows[1].find(",ok"), std::string::npos);

  const auto train_out = dir_ / "one_train";
  const auto t = run("train --model ffnn --optimizer sgd --batch 7 --epochs 1 --data " + data() + " --out " +
                     train_out.string());
  ASSERT_EQ(t.code, 0);
  EXPECT_EQ(slurp(train_out / "confusion.csv"), slurp(out / "ffnn_0_sgd_7_1" / "confusion.csv"));
  EXPECT_EQ(slurp(train_out / "model.femo"), slurp(out / "ffnn_0_sgd_7_1" / "model.femo"));
}

TEST_F(CliTest, PredictIsADeterministicDistribution) {
  const auto out = dir_ / "predict_model";
  ASSERT_EQ(run("train --model ffnn --epochs 0 --data " + data() + " --out " + out.string()).code, 0);
  const std::string cmd = "predict --model " + (out / "model.femo").string() + " --image " + (dir_ / "face.pgm").string();
  const auto a = run(cmd), b = run(cmd);
  ASSERT_EQ(a.code, 0);
  EXPECT_EQ(a.out, b.out);
  const auto rows = lines(a.out);
  ASSERT_EQ(rows.size(), 10u);
  EXPECT_EQ(rows[0], "emotion,probability");
  double sum = 0, prev = 2;
  for (std::size_t i = 1; i <= 7; ++i) {
    const double p = std::stod(rows[i].substr(rows[i].find(',') + 1));
    EXPECT_LE(p, prev);
    prev = p;
    sum += p;
  }
  EXPECT_NEAR(sum, 1.0, 1e-6);
  EXPECT_EQ(rows[8], "top1," + rows[1].substr(0, rows[1].find(',')));
}

TEST_F(CliTest, DetectAcceptAllOnBaseWindow) {
  const auto share = fs::path(FER_FORGE_SHARE);
  const auto r = run("detect --cascade " + (share / "cascades" / "accept_all.json").string() + " --image " +
                     (dir_ / "window.pgm").string() + " --min-neighbors 1");
  ASSERT_EQ(r.code, 0);
  const auto rows = lines(r.out);
  ASSERT_EQ(rows.size(), 2u);
  EXPECT_EQ(rows[0], "x,y,w,h,neighbors");
  EXPECT_EQ(rows[1], "0,0,24,24,1");
}

TEST_F(CliTest, GradcheckExitCodes) {
  const auto ok = run("gradcheck --model ffnn");
  EXPECT_EQ(ok.code, 0);
  EXPECT_NE(ok.out.find("PASS"), std::string::npos);
  const auto bad = run("gradcheck --model ffnn --corrupt-layer 1");
  EXPECT_EQ(bad.code, 1);
  EXPECT_NE(bad.out.find("FAIL"), std::string::npos);
}

TEST_F(CliTest, HistogramCountsRecords) {
  const auto r = run("histogram --data " + data());
  ASSERT_EQ(r.code, 0);
  EXPECT_NE(r.out.find("all,"), std::string::npos);
  EXPECT_NE(r.out.find("train,"), std::string::npos);
}
