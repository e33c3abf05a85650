#include <sys/wait.h>

#include <cstdlib>
#include <filesystem>
#include <fstream>
#include <sstream>
#include <string>
#include <vector>

#include <gtest/gtest.h>

#include "fkaconv/synthdata.hpp"
#include "fkaconv/cloud_io.hpp"
#include "json.hpp"

namespace fs = std::filesystem;

namespace {

struct Result {
  int code = -1;
  std::string out;
};

class Cli : public ::testing::Test {
 protected:
  void SetUp() override {
    const auto* info = ::testing::UnitTest::GetInstance()->current_test_info();
    dir_ = fs::path(::testing::TempDir()) / (std::string("fkac_cli_") + info->name());
    fs::remove_all(dir_);
    fs::create_directories(dir_);
  }

  Result run(const std::string& args) const {
    const auto log = dir_ / "stdout.txt";
    const std::string cmd = std::string(FKAC_CLI_PATH) + " " + args + " > " + log.string() + " 2>&1";
    const int status = std::system(cmd.c_str());
    return {WIFEXITED(status) ? WEXITSTATUS(status) : -1, slurp(log)};
  }

  static std::string slurp(const fs::path& p) {
    std::ifstream is(p);
    std::ostringstream ss;
    ss << is.rdbuf();
    return ss.str();
  }

  static std::vector<std::string> lines(const fs::path& p) {
    std::istringstream is(slurp(p));
    std::vector<std::string> out;
    for (std::string l; std::getline(is, l);)
      if (!l.empty()) out.push_back(l);
    return out;
  }

  std::string path(const std::string& name) const { return (dir_ / name).string(); }

  void write(const std::string& name, const std::string& text) const { std::ofstream(dir_ / name) << text; }

  std::string sphere_cloud(std::size_t n) const {
    fkac::SceneSpec s;
    s.kind = fkac::SceneKind::kSphere;
    s.n_points = n;
    fkac::save_cloud(dir_ / "cloud.xyz", fkac::generate(s), fkac::CloudFormat::kXyz);
    return path("cloud.xyz");
  }

  std::string trained_checkpoint() const {
    EXPECT_EQ(run("train --config " + std::string(FKAC_SMOKE_CONFIG) + " --out " + path("run")).code, 0);
    return path("run/final.ckpt");
  }

  fs::path dir_;
};

TEST_F(Cli, SampleBenchWritesOneRowPerStrategyAndAManifest) {
  const auto r = run("sample-bench --sizes 1000 --repeats 1 --warmup 0 --seed 4 --out " + path("b.csv"));
  ASSERT_EQ(r.code, 0) << r.out;
  const auto rows = lines(dir_ / "b.csv");
  ASSERT_EQ(rows.size(), 5u);
  EXPECT_EQ(rows[0], "strategy,n_points,q_count,k,seed,elapsed_ms,iterations");
  for (std::size_t i = 1; i < rows.size(); ++i) EXPECT_NE(rows[i].find(",1000,500,16,4,"), std::string::npos);
  const auto m = nlohmann::json::parse(slurp(dir_ / "b.csv.manifest.json"));
  EXPECT_EQ(m["command"], "sample-bench");
  EXPECT_EQ(m["seed"], 4);
  EXPECT_TRUE(m.contains("build") && m.contains("started") && m.contains("finished"));
  EXPECT_EQ(m["outputs"][0], path("b.csv"));
}

TEST_F(Cli, UnknownStrategyIsAUsageError) {
  const auto r = run("sample-bench --strategies random,bogus --out " + path("b.csv"));
  EXPECT_EQ(r.code, 2);
  EXPECT_NE(r.out.find("bogus"), std::string::npos);
  EXPECT_FALSE(fs::exists(dir_ / "b.csv"));
}

TEST_F(Cli, OptionsCanComeFromJsonAndFlagsWin) {
  write("v.json", R"({"scenes": 2, "q-counts": [64, 256], "points": 1024, "seed": 9})");
  const auto r = run("voxel-rule --config " + path("v.json") + " --scenes 1 --out " + path("v.csv"));
  ASSERT_EQ(r.code, 0) << r.out;
  EXPECT_EQ(lines(dir_ / "v.csv").size(), 3u);  // 1 scene × 2 q counts
  EXPECT_EQ(nlohmann::json::parse(slurp(dir_ / "v.csv.manifest.json"))["seed"], 9);
}

TEST_F(Cli, VoxelRuleRejectsEmptyOrUnknownOptions) {
  write("empty.json", R"({"q-counts": []})");
  EXPECT_EQ(run("voxel-rule --config " + path("empty.json") + " --out " + path("v.csv")).code, 2);
  write("bad.json", R"({"nope": 1})");
  const auto r = run("voxel-rule --config " + path("bad.json"));
  EXPECT_EQ(r.code, 2);
  EXPECT_NE(r.out.find("'nope'"), std::string::npos);
}

TEST_F(Cli, TrainWritesMetricsCheckpointsAndResumes) {
  const auto ck = trained_checkpoint();
  EXPECT_TRUE(fs::exists(ck));
  EXPECT_TRUE(fs::exists(dir_ / "run/best.ckpt"));
  EXPECT_TRUE(fs::exists(dir_ / "run/manifest.json"));
  auto rows = lines(dir_ / "run/metrics.csv");
  ASSERT_EQ(rows.size(), 3u);
  EXPECT_EQ(rows[0], "epoch,lr,train_loss,train_accuracy,test_accuracy,seconds");

  auto cfg = nlohmann::json::parse(slurp(FKAC_SMOKE_CONFIG));
  cfg["train"]["epochs"] = 3;
  write("three.json", cfg.dump());
  const auto r = run("train --config " + path("three.json") + " --out " + path("run") + " --resume " + ck);
  ASSERT_EQ(r.code, 0) << r.out;
  rows = lines(dir_ / "run/metrics.csv");
  ASSERT_EQ(rows.size(), 4u);
  EXPECT_EQ(rows[3].substr(0, 2), "2,");
  EXPECT_NE(r.out.find("epoch 2"), std::string::npos);
  EXPECT_EQ(r.out.find("epoch 0"), std::string::npos);
}

TEST_F(Cli, InvalidTrainFieldIsNamed) {
  write("bad.json", R"({"train": {"batch_size": 0}})");
  const auto r = run("train --config " + path("bad.json") + " --out " + path("run"));
  EXPECT_EQ(r.code, 2);
  EXPECT_NE(r.out.find("'batch_size'"), std::string::npos);
  write("bad2.json", R"({"trian": {}})");
  EXPECT_NE(run("train --config " + path("bad2.json")).out.find("'trian'"), std::string::npos);
}

TEST_F(Cli, GradcheckPassesAndNamesACorruptedOp) {
  auto r = run("gradcheck --out " + path("g.txt"));
  ASSERT_EQ(r.code, 0) << r.out;
  EXPECT_NE(r.out.find("fkaconv.gate.alpha"), std::string::npos);
  EXPECT_NE(r.out.find("fkaconv.gate.beta"), std::string::npos);
  EXPECT_TRUE(fs::exists(dir_ / "g.txt.manifest.json"));
  r = run("gradcheck --corrupt sigmoid");
  EXPECT_EQ(r.code, 1);
  EXPECT_NE(r.out.find("FAIL"), std::string::npos);
  std::istringstream is(r.out);
  bool named = false;
  for (std::string l; std::getline(is, l);) named |= l.rfind("sigmoid ", 0) == 0 && l.find("FAIL") != std::string::npos;
  EXPECT_TRUE(named) << r.out;
  EXPECT_EQ(run("gradcheck --corrupt matmul").code, 2);
}

TEST_F(Cli, FilterResponseRowsRangeAndDeterminism) {
  const auto ck = trained_checkpoint();
  const auto cloud = sphere_cloud(100);
  const std::string args = "filter-response --checkpoint " + ck + " --cloud " + cloud + " --layer 1 --filter 2 --out ";
  ASSERT_EQ(run(args + path("f1.csv")).code, 0);
  ASSERT_EQ(run(args + path("f2.csv")).code, 0);
  EXPECT_EQ(slurp(dir_ / "f1.csv"), slurp(dir_ / "f2.csv"));
  const auto rows = lines(dir_ / "f1.csv");
  ASSERT_EQ(rows.size(), 101u);
  EXPECT_EQ(rows[0], "x,y,z,response");
  for (std::size_t i = 1; i < rows.size(); ++i) {
    const double v = std::stod(rows[i].substr(rows[i].rfind(',') + 1));
    EXPECT_GE(v, 0.0);
    EXPECT_LE(v, 1.0);
  }
  EXPECT_EQ(run("filter-response --checkpoint " + ck + " --cloud " + cloud + " --layer 1 --filter 9999").code, 2);
}

TEST_F(Cli, InferReportsVotesPerClass) {
  const auto ck = trained_checkpoint();
  const auto r = run("infer --checkpoint " + ck + " --cloud " + sphere_cloud(80) + " --votes 3 --out " + path("p.csv"));
  ASSERT_EQ(r.code, 0) << r.out;
  const auto rows = lines(dir_ / "p.csv");
  ASSERT_EQ(rows.size(), 4u);
  int votes = 0;
  for (std::size_t i = 1; i < rows.size(); ++i) votes += std::stoi(rows[i].substr(rows[i].rfind(',') + 1));
  EXPECT_EQ(votes, 3);
  EXPECT_NE(r.out.find("label "), std::string::npos);
}

TEST_F(Cli, MissingSubcommandOrFileIsAUsageError) {
  EXPECT_EQ(run("").code, 2);
  EXPECT_EQ(run("infer --checkpoint " + path("none.ckpt") + " --cloud " + path("none.xyz")).code, 2);
  EXPECT_EQ(run("--threads 0 gradcheck").code, 2);
}

}  // namespace
