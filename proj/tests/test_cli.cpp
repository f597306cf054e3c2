#include <gtest/gtest.h>

#include <sys/wait.h>
#include <unistd.h>

#include <cstdlib>
#include <filesystem>
#include <fstream>
#include <sstream>
#include <string>

#include "wkrige/io.hpp"

namespace fs = std::filesystem;
using wkrige::io::json;

namespace {

class Cli : public ::testing::Test {
 protected:
  void SetUp() override {
    dir_ = fs::temp_directory_path() / ("wkrige_cli_" + std::to_string(::getpid()) + "_" +
                                        ::testing::UnitTest::GetInstance()->current_test_info()->name());
    fs::create_directories(dir_);
  }
  void TearDown() override { fs::remove_all(dir_); }

  std::string path(const std::string& name) const { return (dir_ / name).string(); }

  /// Runs the CLI; returns the exit code and captures stderr.
  int run(const std::string& args) {
    const std::string err = path("stderr.txt");
    const std::string cmd = std::string(WKRIGE_CLI) + " " + args + " > " + path("stdout.txt") + " 2> " + err;
    const int status = std::system(cmd.c_str());
    stderr_ = slurp(err);
    stdout_ = slurp(path("stdout.txt"));
    return WIFEXITED(status) ? WEXITSTATUS(status) : -1;
  }

  static std::string slurp(const std::string& file) {
    std::ifstream in(file, std::ios::binary);
    std::ostringstream os;
    os << in.rdbuf();
    return os.str();
  }

  void write(const std::string& name, const std::string& text) { std::ofstream(path(name)) << text; }

  fs::path dir_;
  std::string stderr_;
  std::string stdout_;
};

}  // namespace

TEST_F(Cli, ToyGenIsByteIdenticalPerSeed) {
  ASSERT_EQ(run("toy-gen -n 50 --seed 3 -o " + path("a.json")), 0);
  ASSERT_EQ(run("toy-gen -n 50 --seed 3 -o " + path("b.json")), 0);
  EXPECT_EQ(slurp(path("a.json")), slurp(path("b.json")));
  const json doc = json::parse(slurp(path("a.json")));
  EXPECT_EQ(doc["observations"].size(), 50u);
  EXPECT_EQ(doc["grid_size"], 100);
}

TEST_F(Cli, ToyGenRejectsSingleObservation) {
  EXPECT_EQ(run("toy-gen -n 1 -o " + path("a.json")), 1);
  const json err = json::parse(stderr_);
  EXPECT_EQ(err["error"], "validation");
  EXPECT_FALSE(fs::exists(path("a.json")));
}

TEST_F(Cli, FitPredictEvalPipeline) {
  ASSERT_EQ(run("toy-gen -n 30 --seed 1 -o " + path("d.json")), 0);
  ASSERT_EQ(run("fit -d " + path("d.json") + " -o " + path("m.json") + " --report " + path("r.tsv")), 0) << stderr_;
  EXPECT_EQ(slurp(path("r.tsv")).find("index\tlength_scale"), slurp(path("r.tsv")).find('\n') + 1);
  ASSERT_EQ(run("predict -m " + path("m.json") + " -t " + path("d.json") + " --mode constrained -o " + path("p.json")), 0);
  const json preds = json::parse(slurp(path("p.json")));
  const json data = json::parse(slurp(path("d.json")));
  for (std::size_t i = 0; i < 30; ++i)
    for (std::size_t k = 0; k < 100; ++k)
      EXPECT_NEAR(preds["predictions"][i]["quantiles"][k].get<double>(), data["observations"][i]["quantiles"][k].get<double>(), 1e-10);
  ASSERT_EQ(run("eval -m " + path("m.json") + " --test " + path("d.json")), 0);
  EXPECT_EQ(stdout_.substr(0, stdout_.find('\n')), "rmse_mean\trmse_q95\trmse_w\tcount");

  write("empty.json", R"({"targets": []})");
  ASSERT_EQ(run("predict -m " + path("m.json") + " -t " + path("empty.json") + " -o " + path("e.json")), 0);
  EXPECT_TRUE(json::parse(slurp(path("e.json")))["predictions"].empty());

  write("bad.json", R"({"targets": [[0.5]]})");
  EXPECT_EQ(run("predict -m " + path("m.json") + " -t " + path("bad.json") + " -o " + path("x.json")), 1);
  EXPECT_FALSE(fs::exists(path("x.json")));
}

TEST_F(Cli, FitVariogramAndSplits) {
  ASSERT_EQ(run("toy-gen -n 40 --seed 2 -o " + path("d.json")), 0);
  ASSERT_EQ(run("fit --method variogram-ls -d " + path("d.json") + " -o " + path("m.json") + " --report " + path("v.tsv")), 0);
  const std::string v = slurp(path("v.tsv"));
  EXPECT_NE(v.find("h\tgamma\tpair_count\n"), std::string::npos);
  ASSERT_EQ(run("eval -d " + path("d.json") + " --split 0.8 --repeats 2 --seed 4 -o " + path("s.tsv")), 0) << stderr_;
  const std::string s = slurp(path("s.tsv"));
  EXPECT_NE(s.find("P_WK_LS"), std::string::npos);
  EXPECT_NE(s.find("WK_CV"), std::string::npos);
}

TEST_F(Cli, ValidationErrorsListEveryRecord) {
  write("d.json", R"({"dim": 1, "grid_size": 2, "observations": [
    {"x": [0], "quantiles": [1, 0]}, {"x": [1, 2], "quantiles": [0, 1]}, {"x": [2], "quantiles": [0, 1]}]})");
  EXPECT_EQ(run("fit -d " + path("d.json") + " -o " + path("m.json")), 1);
  const json err = json::parse(stderr_);
  EXPECT_EQ(err["details"].size(), 2u);
  EXPECT_FALSE(fs::exists(path("m.json")));
}

TEST_F(Cli, ZeroVarianceAndTooFewBins) {
  write("same.json", R"({"dim": 1, "grid_size": 2, "observations": [
    {"x": [0], "quantiles": [0, 1]}, {"x": [1], "quantiles": [0, 1]}, {"x": [2], "quantiles": [0, 1]}]})");
  EXPECT_EQ(run("fit -d " + path("same.json") + " -o " + path("m.json")), 1);
  EXPECT_EQ(json::parse(stderr_)["message"], "zero variance data");
  ASSERT_EQ(run("toy-gen -n 2 -o " + path("two.json")), 0);
  EXPECT_EQ(run("fit --method variogram-ls --bins 1 -d " + path("two.json") + " -o " + path("m.json")), 1);
  EXPECT_EQ(json::parse(stderr_)["message"], "fewer than 2 points");
  EXPECT_FALSE(fs::exists(path("m.json")));
}

TEST_F(Cli, NumericalFailureExitsWithTwo) {
  ASSERT_EQ(run("toy-gen -n 60 --seed 5 -o " + path("d.json")), 0);
  ASSERT_EQ(run("fit -d " + path("d.json") + " -o " + path("m.json")), 0);
  json model = json::parse(slurp(path("m.json")));
  model["params"]["length_scale"] = 1e4;
  model["params"]["nu"] = 2.5;
  write("bad_model.json", model.dump());
  EXPECT_EQ(run("predict -m " + path("bad_model.json") + " -t " + path("d.json") + " -o " + path("p.json")), 2);
  EXPECT_EQ(json::parse(stderr_)["error"], "numerical");
}

TEST_F(Cli, UsageAndMissingFiles) {
  EXPECT_EQ(run("fit -d " + path("nope.json") + " -o " + path("m.json")), 1);
  EXPECT_EQ(run("fit --method kriging -d x -o y"), 1);
  EXPECT_EQ(run(""), 1);
  EXPECT_EQ(run("--help"), 0);
  EXPECT_EQ(run("fit --nu-set 1/3 -d " + path("nope.json") + " -o " + path("m.json")), 1);
}

TEST_F(Cli, LooBenchTable) {
  ASSERT_EQ(run("loo-bench --sizes 8,12 --ls-grid-size 5 -o " + path("b.tsv") + " --pairs-out " + path("pairs.tsv")), 0) << stderr_;
  const std::string t = slurp(path("b.tsv"));
  EXPECT_EQ(t.substr(0, t.find('\n')), "n\tt_naive\tt_virtual\tratio\tmax_rel_diff\tcandidates\tadmissible");
  EXPECT_NE(slurp(path("pairs.tsv")).find("mse_naive\tmse_virtual"), std::string::npos);
}

TEST_F(Cli, ThreadsFromEnvironment) {
  ASSERT_EQ(run("toy-gen -n 30 --seed 6 -o " + path("d.json")), 0);
  ASSERT_EQ(run("fit -d " + path("d.json") + " -o " + path("m1.json") + " --threads 1"), 0);
  ASSERT_EQ(run("fit -d " + path("d.json") + " -o " + path("m3.json") + " --threads 3"), 0);
  const std::string env_cmd = "WKRIGE_THREADS=2 " + std::string(WKRIGE_CLI) + " fit -d " + path("d.json") + " -o " + path("m2.json");
  ASSERT_EQ(std::system(env_cmd.c_str()), 0);
  EXPECT_EQ(json::parse(slurp(path("m1.json")))["params"], json::parse(slurp(path("m3.json")))["params"]);
  EXPECT_EQ(json::parse(slurp(path("m1.json")))["params"], json::parse(slurp(path("m2.json")))["params"]);
}
