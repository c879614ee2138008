// Drives the abd executable as a subprocess.

#include <gtest/gtest.h>

#include <nlohmann/json.hpp>

#include <array>
#include <chrono>
#include <cstdio>
#include <cstdlib>
#include <filesystem>
#include <fstream>
#include <sstream>
#include <string>
#include <sys/wait.h>

namespace fs = std::filesystem;

namespace {

struct Proc {
  int code = -1;
  std::string out;
};

Proc run(const std::string& args, bool deterministic = false) {
  std::string cmd = std::string(deterministic ? "ABD_DETERMINISTIC=1 " : "") + ABD_CLI + " " + args + " 2>&1";
  Proc r;
  FILE* p = popen(cmd.c_str(), "r");
  if (!p) return r;
  std::array<char, 512> buf;
  while (fgets(buf.data(), buf.size(), p)) r.out += buf.data();
  int status = pclose(p);
  r.code = WIFEXITED(status) ? WEXITSTATUS(status) : -1;
  return r;
}

std::string slurp(const fs::path& p) {
  std::ifstream is(p, std::ios::binary);
  std::stringstream ss;
  ss << is.rdbuf();
  return ss.str();
}

class CliTest : public ::testing::Test {
 protected:
  void SetUp() override {
    dir_ = fs::temp_directory_path() /
           ("abd_cli_" + std::string(::testing::UnitTest::GetInstance()->current_test_info()->name()));
    fs::remove_all(dir_);
    fs::create_directories(dir_);
  }
  void TearDown() override { fs::remove_all(dir_); }
  std::string path(const std::string& rel) const { return (dir_ / rel).string(); }
  static std::string src(const std::string& rel) { return std::string(ABD_SOURCE_DIR) + "/" + rel; }

  fs::path dir_;
};

TEST_F(CliTest, DyncheckPassesOnShippedDoublePendulum) {
  Proc r = run("dyncheck --tree " + src("models/double_pendulum.json"));
  EXPECT_EQ(r.code, 0) << r.out;
  EXPECT_NE(r.out.find("max |qdd_aba - qdd_oracle|"), std::string::npos);
}

TEST_F(CliTest, DyncheckRejectsNegativeMassWithDataError) {
  auto doc = nlohmann::json::parse(slurp(src("models/double_pendulum.json")));
  doc["links"][1]["mass"] = -1.0;
  std::ofstream(path("neg.json")) << doc.dump();
  Proc r = run("dyncheck --tree " + path("neg.json"));
  EXPECT_EQ(r.code, 2) << r.out;
}

TEST_F(CliTest, DyncheckZeroSamplesIsUsageError) {
  EXPECT_EQ(run("dyncheck --tree " + src("models/double_pendulum.json") + " --n-random 0").code, 64);
}

TEST_F(CliTest, UsageErrorsExit64) {
  EXPECT_EQ(run("").code, 64);
  EXPECT_EQ(run("no-such-command").code, 64);
  EXPECT_EQ(run("train-policy --env double_pendulum_balance --actor mlp").code, 64);  // no --out
  EXPECT_EQ(run("--help").code, 0);
}

TEST_F(CliTest, UnknownActorListsChoices) {
  Proc r = run("train-policy --env double_pendulum_balance --actor transformer --out " + path("x"));
  EXPECT_EQ(r.code, 64);
  EXPECT_NE(r.out.find("abdnet, abdnet-noorth, gnn, mlp"), std::string::npos) << r.out;
}

TEST_F(CliTest, BadConfigIsUsageError) {
  std::ofstream(path("bad.json")) << R"({"gamma": 2.0})";
  EXPECT_EQ(run("train-policy --env double_pendulum_balance --actor mlp --config " + path("bad.json") + " --out " +
                path("o"))
                .code,
            64);
  std::ofstream(path("typo.json")) << R"({"totl_steps": 10})";
  EXPECT_EQ(run("train-policy --env double_pendulum_balance --actor mlp --config " + path("typo.json") + " --out " +
                path("o"))
                .code,
            64);
}

TEST_F(CliTest, SmokeTrainingIsFastAndCheckpoints) {
  const auto t0 = std::chrono::steady_clock::now();
  Proc r = run("train-policy --env double_pendulum_balance --actor abdnet --config " + src("configs/smoke.json") +
              " --out " + path("run"));
  const double secs = std::chrono::duration<double>(std::chrono::steady_clock::now() - t0).count();
  ASSERT_EQ(r.code, 0) << r.out;
  EXPECT_LT(secs, 60.0);
  EXPECT_TRUE(fs::exists(path("run/manifest.json")));
  EXPECT_TRUE(fs::exists(path("run/metrics.csv")));
  EXPECT_TRUE(fs::exists(path("run/policy.abd")));
  int ckpts = 0;
  for (const auto& e : fs::directory_iterator(path("run/checkpoints"))) ckpts += e.path().extension() == ".abd";
  EXPECT_GE(ckpts, 1);
  auto man = nlohmann::json::parse(slurp(path("run/manifest.json")));
  EXPECT_EQ(man["command"], "train-policy");
  EXPECT_EQ(man["config"]["total_steps"], 1000);
  EXPECT_TRUE(man.contains("morphology_hash"));
  EXPECT_TRUE(man.contains("version"));
}

TEST_F(CliTest, FlagsOverrideConfigFile) {
  Proc r = run("train-policy --env double_pendulum_balance --actor mlp --config " + src("configs/smoke.json") +
              " --total-steps 500 --seed 9 --out " + path("run"));
  ASSERT_EQ(r.code, 0) << r.out;
  auto man = nlohmann::json::parse(slurp(path("run/manifest.json")));
  EXPECT_EQ(man["config"]["total_steps"], 500);
  EXPECT_EQ(man["seed"], 9);
}

TEST_F(CliTest, ReplayReproducesMetricsByteForByte) {
  ASSERT_EQ(run("train-policy --env double_pendulum_balance --actor abdnet --config " + src("configs/smoke.json") +
                    " --out " + path("a"),
                true)
                .code,
            0);
  ASSERT_EQ(run("replay --manifest " + path("a/manifest.json") + " --out " + path("b"), true).code, 0);
  EXPECT_EQ(slurp(path("a/metrics.csv")), slurp(path("b/metrics.csv")));
  EXPECT_EQ(slurp(path("a/eval.json")), slurp(path("b/eval.json")));
  EXPECT_EQ(slurp(path("a/policy.abd")), slurp(path("b/policy.abd")));
}

TEST_F(CliTest, FlopsMatchesInstrumentedCounter) {
  Proc r = run("flops --tree " + src("models/chain2.json") + " --actor abdnet --d 8");
  EXPECT_EQ(r.code, 0) << r.out;
  EXPECT_NE(r.out.find("(match)"), std::string::npos) << r.out;
}

TEST_F(CliTest, EvalShiftUnitFactorPrintsFullRetention) {
  ASSERT_EQ(run("train-policy --env double_pendulum_balance --actor mlp --config " + src("configs/smoke.json") +
                " --out " + path("p"))
                .code,
            0);
  Proc r = run("eval-shift --ckpt " + path("p/policy.abd") + " --factors 1.0 --episodes 4 --out " + path("e"));
  ASSERT_EQ(r.code, 0) << r.out;
  EXPECT_NE(r.out.find("retention 100.0"), std::string::npos) << r.out;
  EXPECT_TRUE(fs::exists(path("e/retention.csv")));
  Proc bad = run("eval-shift --ckpt " + path("p/policy.abd") + " --env hopper_hop --factors 1.0 --episodes 1 --out " +
                path("e2"));
  EXPECT_EQ(bad.code, 2) << bad.out;
}

TEST_F(CliTest, TrainDynamicsOnIdentityPresetReachesTinyError) {
  Proc r = run("train-dynamics --env chain2_identity --model abdnet --samples 8000 --out " + path("d"));
  ASSERT_EQ(r.code, 0) << r.out;
  std::istringstream eval(slurp(path("d/eval.csv")));
  std::string line;
  double mse = 1.0;
  while (std::getline(eval, line))
    if (line.rfind("val_mse,", 0) == 0) mse = std::stod(line.substr(8));
  EXPECT_LT(mse, 1e-4);
}

TEST_F(CliTest, AblateWritesOneRowPerVariantSeedMetric) {
  Proc r = run("ablate --env double_pendulum_balance --config " + src("configs/smoke.json") +
              " --seeds 0,1 --variants abdnet,gnn --total-steps 500 --out " + path("a"));
  ASSERT_EQ(r.code, 0) << r.out;
  std::istringstream csv(slurp(path("a/ablation.csv")));
  std::string line;
  int rows = -1;
  while (std::getline(csv, line)) ++rows;
  EXPECT_EQ(rows, 2 * 2 * 4);
  EXPECT_EQ(run("ablate --env double_pendulum_balance --variants transformer --out " + path("b")).code, 64);
}

}  // namespace
