#include <gtest/gtest.h>

#include <cstdlib>
#include <filesystem>
#include <fstream>
#include <initializer_list>
#include <sstream>
#include <string>
#include <vector>

#include "stagecap/cli.hpp"
#include "support/temp_dir.hpp"

namespace fs = std::filesystem;

namespace {

struct CliRun {
  int code = 0;
  std::string out;
  std::string err;
};

CliRun cli(std::vector<std::string> args) {
  args.insert(args.begin(), "stagecap");
  std::vector<const char*> argv;
  for (const auto& a : args) argv.push_back(a.c_str());
  std::ostringstream out, err;
  CliRun r;
  r.code = stagecap::cli::dispatch(static_cast<int>(argv.size()), argv.data(), out, err);
  r.out = out.str();
  r.err = err.str();
  return r;
}

std::string slurp(const fs::path& p) {
  std::ifstream in(p, std::ios::binary);
  std::ostringstream s;
  s << in.rdbuf();
  return s.str();
}

const std::vector<std::string> kSmallModel{
    "--epochs", "1", "--layers", "1", "--heads", "2", "--d-model", "16",
    "--d-ff", "24", "--slots", "2", "--batch", "8", "--min-count", "0"};

std::vector<std::string> with(std::vector<std::string> a,
                              const std::vector<std::string>& b) {
  a.insert(a.end(), b.begin(), b.end());
  return a;
}

// One small corpus and checkpoint shared by the whole suite.
class CliTest : public ::testing::Test {
 protected:
  static void SetUpTestSuite() {
    dir_ = new test::TempDir();
    ASSERT_EQ(cli({"gen-data", "--n", "40", "--n-test", "8", "--seed", "3",
                   "--out", data().string()})
                  .code,
              0);
    const CliRun t = cli(with({"train", "--data", data().string(), "--out",
                            model().string(), "--seed", "3"},
                           kSmallModel));
    ASSERT_EQ(t.code, 0) << t.err;
  }
  static void TearDownTestSuite() {
    delete dir_;
    dir_ = nullptr;
  }
  static fs::path root() { return dir_->path(); }
  static fs::path data() { return root() / "data"; }
  static fs::path model() { return root() / "model"; }

  static test::TempDir* dir_;
};

test::TempDir* CliTest::dir_ = nullptr;

}  // namespace

TEST(Cli, HelpAndUsageErrors) {
  CliRun r = cli({"--help"});
  EXPECT_EQ(r.code, 0);
  for (const char* sub : {"gen-data", "train", "generate", "eval", "bench",
                          "sweep-ratios", "sweep-stages", "sweep-lengths"}) {
    EXPECT_NE(r.out.find(sub), std::string::npos) << sub;
  }
  r = cli({"train", "--help"});
  EXPECT_EQ(r.code, 0);
  EXPECT_NE(r.out.find("--regime"), std::string::npos);
  EXPECT_EQ(cli({}).code, 2);
  r = cli({"nonsense"});
  EXPECT_EQ(r.code, 2);
  EXPECT_NE(r.err.find("stagecap: error:"), std::string::npos);
  test::TempDir d;
  r = cli({"gen-data", "--out", d.path().string(), "--bogus", "1"});
  EXPECT_EQ(r.code, 2);
  EXPECT_NE(r.err.find("--bogus"), std::string::npos);
  r = cli({"gen-data", "--out", d.path().string(), "--n", "abc"});
  EXPECT_EQ(r.code, 2);
}

TEST(Cli, RuntimeErrorsExitOne) {
  test::TempDir d;
  const CliRun r = cli({"generate", "--checkpoint", (d.path() / "none").string(),
                     "--data", (d.path() / "none").string(), "--out",
                     d.path().string()});
  EXPECT_EQ(r.code, 1);
  EXPECT_EQ(r.err.rfind("stagecap: error: ", 0), 0u);
  EXPECT_EQ(cli({"train", "--data", d.path().string(), "--out", d.path().string(),
                 "--regime", "xyz"})
                .code,
            1);
}

TEST(Cli, GenDataDeterministicAndSeeded) {
  test::TempDir d;
  ASSERT_EQ(cli({"gen-data", "--n", "10", "--n-test", "3", "--seed", "5", "--out",
                 (d.path() / "a").string()})
                .code,
            0);
  ASSERT_EQ(cli({"gen-data", "--n", "10", "--n-test", "3", "--seed", "5", "--out",
                 (d.path() / "b").string()})
                .code,
            0);
  ASSERT_EQ(cli({"gen-data", "--n", "10", "--n-test", "3", "--seed", "6", "--out",
                 (d.path() / "c").string()})
                .code,
            0);
  for (const char* f : {"train.captions.tsv", "train.feat", "test.captions.tsv",
                        "config.txt"}) {
    ASSERT_TRUE(fs::exists(d.path() / "a" / f)) << f;
    EXPECT_EQ(slurp(d.path() / "a" / f), slurp(d.path() / "b" / f)) << f;
  }
  EXPECT_NE(slurp(d.path() / "a" / "train.captions.tsv"),
            slurp(d.path() / "c" / "train.captions.tsv"));
}

TEST(Cli, EnvironmentSeedMatchesFlag) {
  test::TempDir d;
  ::setenv("STAGECAP_SEED", "9", 1);
  const CliRun env = cli({"gen-data", "--n", "6", "--n-test", "2", "--out",
                       (d.path() / "env").string()});
  ::unsetenv("STAGECAP_SEED");
  ASSERT_EQ(env.code, 0);
  ASSERT_EQ(cli({"gen-data", "--n", "6", "--n-test", "2", "--seed", "9", "--out",
                 (d.path() / "flag").string()})
                .code,
            0);
  EXPECT_EQ(slurp(d.path() / "env" / "train.captions.tsv"),
            slurp(d.path() / "flag" / "train.captions.tsv"));
  EXPECT_NE(slurp(d.path() / "env" / "config.txt").find("seed=9"), std::string::npos);
  ::setenv("STAGECAP_SEED", "x", 1);
  EXPECT_EQ(cli({"gen-data", "--out", d.path().string()}).code, 1);
  ::unsetenv("STAGECAP_SEED");
}

TEST(Cli, ConfigFileAndFlagPrecedence) {
  test::TempDir d;
  const fs::path cfg = d.path() / "run.cfg";
  {
    std::ofstream f(cfg);
    f << "# small corpus\nn=5\nn-test=4\nseed=2\n";
  }
  ASSERT_EQ(cli({"gen-data", "--config", cfg.string(), "--n", "7", "--out",
                 (d.path() / "o").string()})
                .code,
            0);
  const std::string echo = slurp(d.path() / "o" / "config.txt");
  EXPECT_NE(echo.find("command=gen-data"), std::string::npos);
  EXPECT_NE(echo.find("n=7\n"), std::string::npos);
  EXPECT_NE(echo.find("n-test=4\n"), std::string::npos);
  EXPECT_NE(echo.find("seed=2\n"), std::string::npos);
  // The echoed config reproduces the run.
  ASSERT_EQ(cli({"gen-data", "--config", (d.path() / "o" / "config.txt").string(),
                 "--out", (d.path() / "p").string()})
                .code,
            0);
  EXPECT_EQ(slurp(d.path() / "o" / "train.captions.tsv"),
            slurp(d.path() / "p" / "train.captions.tsv"));
  {
    std::ofstream f(cfg);
    f << "not a setting\n";
  }
  EXPECT_EQ(cli({"gen-data", "--config", cfg.string(), "--out", d.path().string()}).code,
            1);
}

TEST_F(CliTest, TrainIsReproducible) {
  const fs::path again = root() / "model-again";
  ASSERT_EQ(cli(with({"train", "--data", data().string(), "--out", again.string(),
                      "--seed", "3"},
                     kSmallModel))
                .code,
            0);
  for (const char* f : {"checkpoint.manifest", "checkpoint.bin", "loss.csv", "config.txt"}) {
    ASSERT_TRUE(fs::exists(model() / f)) << f;
    EXPECT_EQ(slurp(model() / f), slurp(again / f)) << f;
  }
  const std::string loss = slurp(model() / "loss.csv");
  EXPECT_EQ(loss.rfind("epoch,", 0), 0u);
}

TEST_F(CliTest, EvalMatchesInlineEvaluation) {
  const fs::path g = root() / "gen";
  const CliRun r = cli({"generate", "--checkpoint", model().string(), "--data",
                     data().string(), "--eval-inline", "--length", "fixed:9",
                     "--trace", (g / "trace.jsonl").string(), "--out", g.string()});
  ASSERT_EQ(r.code, 0) << r.err;
  const fs::path e = root() / "eval";
  ASSERT_EQ(cli({"eval", "--captions", (g / "captions.tsv").string(), "--data",
                 data().string(), "--checkpoint", model().string(), "--out",
                 e.string()})
                .code,
            0);
  EXPECT_EQ(slurp(g / "metrics.txt"), slurp(e / "metrics.txt"));
  EXPECT_EQ(slurp(g / "metrics.csv"), slurp(e / "metrics.csv"));
  const std::string trace = slurp(g / "trace.jsonl");
  EXPECT_EQ(std::count(trace.begin(), trace.end(), '\n'), 8 * 5);
}

TEST_F(CliTest, GenerateMethodsAndPasses) {
  for (const auto& [method, passes] :
       std::vector<std::pair<std::string, std::string>>{{"ar", "9"}, {"na", "1"}, {"mnic", "7"}}) {
    const fs::path g = root() / ("gen-" + method);
    ASSERT_EQ(cli({"generate", "--checkpoint", model().string(), "--data",
                   data().string(), "--method", method, "--rounds", "2",
                   "--length", "fixed:9", "--out", g.string()})
                  .code,
              0);
    std::istringstream lines(slurp(g / "captions.tsv"));
    std::string line;
    std::size_t n = 0;
    while (std::getline(lines, line)) {
      ++n;
      EXPECT_EQ(line.substr(line.rfind('\t') + 1), passes) << method;
    }
    EXPECT_EQ(n, 8u);
  }
}

TEST_F(CliTest, SweepsAndBenchProduceTables) {
  const fs::path s = root() / "sweeps";
  CliRun r = cli(with({"sweep-ratios", "--data", data().string(), "--grid", "1.0@1.0",
                    "--out", (s / "ratios").string(), "--seed", "3"},
                   kSmallModel));
  ASSERT_EQ(r.code, 0) << r.err;
  std::string csv = slurp(s / "ratios" / "sweep_ratios.csv");
  EXPECT_EQ(std::count(csv.begin(), csv.end(), '\n'), 2);
  EXPECT_NE(csv.find("\n1,1,1,"), std::string::npos);

  r = cli({"sweep-stages", "--checkpoint", model().string(), "--data",
           data().string(), "--out", (s / "stages").string()});
  ASSERT_EQ(r.code, 0) << r.err;
  csv = slurp(s / "stages" / "stages.csv");
  EXPECT_EQ(std::count(csv.begin(), csv.end(), '\n'), 1 + 4 + 3);

  r = cli({"sweep-lengths", "--checkpoint", model().string(), "--ar-checkpoint",
           model().string(), "--data", data().string(), "--min-length", "9",
           "--max-length", "10", "--out", (s / "lengths").string()});
  ASSERT_EQ(r.code, 0) << r.err;
  csv = slurp(s / "lengths" / "lengths.csv");
  EXPECT_EQ(std::count(csv.begin(), csv.end(), '\n'), 1 + 2 * 3);

  r = cli({"bench", "--checkpoint", model().string(), "--data", data().string(),
           "--scenes", "2", "--reps", "1", "--warmup", "0", "--length", "6",
           "--out", (s / "bench").string()});
  ASSERT_EQ(r.code, 0) << r.err;
  csv = slurp(s / "bench" / "bench.csv");
  EXPECT_NE(csv.find("\nar,"), std::string::npos);
  EXPECT_NE(csv.find("\nmnic-2r,"), std::string::npos);
  EXPECT_EQ(cli({"bench", "--checkpoint", model().string(), "--data", data().string(),
                 "--methods", "beam", "--out", (s / "bad").string()})
                .code,
            1);
}
