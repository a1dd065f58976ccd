#include <gtest/gtest.h>

#include <sys/wait.h>

#include <array>
#include <cstdio>
#include <filesystem>
#include <fstream>
#include <sstream>
#include <string>

namespace fs = std::filesystem;

namespace {

struct Run {
  int code;
  std::string out;
};

// Runs the CLI with stderr folded into stdout.
Run cli(const std::string& args) {
  const std::string cmd = std::string(OVERSEG_CLI) + " " + args + " 2>&1";
  FILE* p = popen(cmd.c_str(), "r");
  if (!p) return {-1, ""};
  std::string out;
  std::array<char, 4096> buf{};
  while (std::fgets(buf.data(), buf.size(), p)) out += buf.data();
  const int status = pclose(p);
  return {WIFEXITED(status) ? WEXITSTATUS(status) : -1, out};
}

std::string slurp(const fs::path& p) {
  std::ifstream in(p, std::ios::binary);
  std::ostringstream s;
  s << in.rdbuf();
  return s.str();
}

fs::path scratch(const std::string& name) {
  auto p = fs::temp_directory_path() / ("overseg_cli_" + name);
  fs::remove_all(p);
  fs::create_directories(p);
  return p;
}

}  // namespace

TEST(Cli, UsageErrorsExitOne) {
  EXPECT_EQ(cli("").code, 1);
  EXPECT_EQ(cli("no-such-command").code, 1);
  const auto r = cli("param-count --variant NOPE");
  EXPECT_EQ(r.code, 1);
  EXPECT_NE(r.out.find("DENSE_KIUNET"), std::string::npos) << r.out;
  EXPECT_EQ(cli("--help").code, 0);
}

TEST(Cli, ParamCountPrintsBothTotalsAndReferences) {
  const auto u = cli("param-count --variant UC_SK");
  const auto k = cli("param-count --variant KIUNET");
  ASSERT_EQ(u.code, 0);
  ASSERT_EQ(k.code, 0);
  EXPECT_NE(u.out.find("total 332545"), std::string::npos) << u.out;
  EXPECT_NE(k.out.find("total 1440097"), std::string::npos) << k.out;
  EXPECT_NE(u.out.find("UC_SK 332545, KIUNET 1440097"), std::string::npos);
  EXPECT_NE(u.out.find("3.1M"), std::string::npos);
  EXPECT_NE(u.out.find("0.29M"), std::string::npos);
}

TEST(Cli, AnalyzeRfOverBranchShrinksByFour) {
  const auto r = cli("analyze-rf --variant OC_SK --levels 3");
  ASSERT_EQ(r.code, 0) << r.out;
  std::istringstream in(r.out);
  std::string line;
  std::vector<std::string> approx;
  while (std::getline(in, line)) {
    if (line.find(".relu") == std::string::npos) continue;
    approx.push_back(line.substr(line.find_last_of(' ') + 1));
  }
  EXPECT_EQ(approx, (std::vector<std::string>{"3", "3/4", "3/16"}));
  EXPECT_EQ(r.out.find("\nunder "), std::string::npos);  // no under-branch rows
}

TEST(Cli, GradcheckSeedSevenPasses) {
  const auto r = cli("gradcheck --seed 7");
  EXPECT_EQ(r.code, 0);
  EXPECT_NE(r.out.find("all ops pass"), std::string::npos);
  EXPECT_EQ(r.out.find("FAIL"), std::string::npos);
}

TEST(Cli, GenDataIsByteIdenticalPerSeed) {
  const auto d = scratch("gen");
  ASSERT_EQ(cli("gen-data --out " + (d / "a").string() + " --size 16 --n-train 2 --n-test 1 --seed 4").code, 0);
  ASSERT_EQ(cli("gen-data --out " + (d / "b").string() + " --size 16 --n-train 2 --n-test 1 --seed 4").code, 0);
  for (const auto* f : {"manifest.tsv", "images/s0000.kiut", "masks/s0002.kiut"})
    EXPECT_EQ(slurp(d / "a" / f), slurp(d / "b" / f)) << f;
  EXPECT_EQ(cli("gen-data --out " + (d / "c").string() + " --size 20").code, 1);
  fs::remove_all(d);
}

TEST(Cli, TrainEvalPredictRoundTrip) {
  const auto d = scratch("pipeline");
  const auto m = (d / "data" / "manifest.tsv").string();
  ASSERT_EQ(cli("gen-data --out " + (d / "data").string() + " --size 16 --n-train 2 --n-test 2 --seed 9").code, 0);
  const std::string model = " --channels 2,4,4";
  const auto t = cli("train" + model + " --manifest " + m + " --out " + (d / "run").string() + " --epochs 2 --seed 3");
  ASSERT_EQ(t.code, 0) << t.out;
  const auto log = slurp(d / "run" / "log.csv");
  const auto t2 = cli("train" + model + " --manifest " + m + " --out " + (d / "run2").string() + " --epochs 2 --seed 3");
  ASSERT_EQ(t2.code, 0);
  EXPECT_EQ(log, slurp(d / "run2" / "log.csv"));

  const auto ck = (d / "run" / "final.kiuc").string();
  const auto e = cli("eval" + model + " --checkpoint " + ck + " --manifest " + m + " --out " + (d / "ev").string());
  ASSERT_EQ(e.code, 0) << e.out;
  // last logged val dice equals the eval mean
  const auto last = log.substr(log.rfind(',', log.size() - 2) + 1);
  const auto csv = slurp(d / "ev" / "metrics.csv");
  const auto mean = csv.substr(csv.find("\nmean,") + 6);
  EXPECT_NEAR(std::stod(last), std::stod(mean.substr(0, mean.find(','))), 1e-6);
  ASSERT_EQ(cli("eval" + model + " --checkpoint " + ck + " --manifest " + m + " --out " + (d / "ev2").string()).code, 0);
  EXPECT_EQ(csv, slurp(d / "ev2" / "metrics.csv"));

  const auto p = cli("predict" + model + " --checkpoint " + ck + " --manifest " + m + " --split test --out " +
                     (d / "pred").string());
  ASSERT_EQ(p.code, 0) << p.out;
  EXPECT_TRUE(fs::exists(d / "pred" / "s0002_pred.kiut"));
  EXPECT_TRUE(fs::exists(d / "pred" / "s0003_pred.kiut"));

  // mismatched config lists the offending tensors
  const auto bad = cli("eval --channels 2,4,8 --checkpoint " + ck + " --manifest " + m + " --out " + (d / "x").string());
  EXPECT_EQ(bad.code, 1);
  EXPECT_NE(bad.out.find("wrong shape"), std::string::npos) << bad.out;
  EXPECT_EQ(cli("eval" + model + " --checkpoint " + (d / "none.kiuc").string() + " --manifest " + m + " --out " +
                (d / "x").string())
                .code,
            3);
  fs::remove_all(d);
}
