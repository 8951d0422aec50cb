#include <gtest/gtest.h>

#include <json.hpp>

#include <cstdlib>
#include <fstream>
#include <random>
#include <sstream>

#include "fqr/dataset.hpp"
#include "test_util.hpp"

using namespace fqr;
using json = nlohmann::ordered_json;
namespace fs = std::filesystem;

namespace {

std::string slurp(const fs::path& p) {
  std::ifstream in(p, std::ios::binary);
  std::stringstream ss;
  ss << in.rdbuf();
  return ss.str();
}

struct CliRun {
  int status = 0;
  std::string output;
};

CliRun cli(const std::string& args, const fs::path& log) {
  const std::string cmd = std::string(FQR_CLI_PATH) + " " + args + " > " + log.string() + " 2>&1";
  const int raw = std::system(cmd.c_str());
  return {WIFEXITED(raw) ? WEXITSTATUS(raw) : -1, slurp(log)};
}

// 20 x 8 toy data: intercept plus one covariate with a sine effect.
fs::path toy_dataset(const std::string& name, Eigen::Index n = 20, Eigen::Index T = 8) {
  const fs::path dir = test::scratch_dir(name);
  std::mt19937_64 rng(5);
  std::normal_distribution<double> z;
  Matrix X(n, 2), Y(n, T);
  Vector t(T);
  for (Eigen::Index l = 0; l < T; ++l) t(l) = static_cast<double>(l) / static_cast<double>(T - 1);
  for (Eigen::Index i = 0; i < n; ++i) {
    X(i, 0) = 1.0;
    X(i, 1) = z(rng);
    for (Eigen::Index l = 0; l < T; ++l) Y(i, l) = X(i, 1) * std::sin(3.0 * t(l)) + z(rng);
  }
  csv::write_matrix((dir / "y.csv").string(), Y);
  csv::write_matrix((dir / "x.csv").string(), X);
  csv::write_matrix((dir / "t.csv").string(), t);
  return dir;
}

std::string inputs(const fs::path& dir) {
  return "--responses " + (dir / "y.csv").string() + " --design " + (dir / "x.csv").string() + " --grid " +
         (dir / "t.csv").string();
}

json manifest(const fs::path& out) {
  std::ifstream in(out / "manifest.json");
  return json::parse(in);
}

// Everything except the runtime block, which holds the timestamp, thread count and timings.
std::string deterministic_part(const fs::path& out) {
  json m = manifest(out);
  m.erase("runtime");
  std::string all = m.dump();
  for (const auto& c : m["curves"]) all += slurp(out / c["file"].get<std::string>());
  return all;
}

}  // namespace

TEST(CliAnalyze, ToyRunWritesManifestAndCurves) {
  const fs::path dir = toy_dataset("cli_toy");
  const CliRun r = cli("analyze " + inputs(dir) + " --tau 0.5 --method li --mc-draws 2000 --out " + (dir / "o").string(),
                    dir / "log.txt");
  ASSERT_EQ(r.status, 0) << r.output;
  const json m = manifest(dir / "o");
  EXPECT_EQ(m["config"]["seed"].get<std::uint64_t>(), 20240601u);
  ASSERT_EQ(m["curves"].size(), 2u);  // default contrasts: every design column
  for (const auto& c : m["curves"]) {
    EXPECT_GT(c["c_n_alpha"].get<double>(), 1.96);
    EXPECT_TRUE(c["simbas_band_duality"].get<bool>());
    const std::string csv_text = slurp(dir / "o" / c["file"].get<std::string>());
    EXPECT_EQ(csv_text.rfind("t,estimate,pw_lo,pw_hi,joint_lo,joint_hi,simbas,flag\n", 0), 0u);
    EXPECT_EQ(std::count(csv_text.begin(), csv_text.end(), '\n'), 1 + 7 * 4 + 1);
  }
}

TEST(CliAnalyze, ThreeTausTwoContrastsGiveSixBlocks) {
  const fs::path dir = toy_dataset("cli_blocks");
  const CliRun r = cli("analyze " + inputs(dir) + " --tau 0.1 --tau 0.5 --tau 0.9 --contrast 1 --contrast 1,1 "
                    "--mc-draws 2000 --out " + (dir / "o").string(), dir / "log.txt");
  ASSERT_EQ(r.status, 0) << r.output;
  const json m = manifest(dir / "o");
  ASSERT_EQ(m["curves"].size(), 6u);
  EXPECT_NEAR(m["curves"][1]["contrast"][0].get<double>(), std::sqrt(0.5), 1e-15);
  for (const auto& c : m["curves"]) {
    EXPECT_TRUE(fs::exists(dir / "o" / c["file"].get<std::string>()));
    EXPECT_TRUE(c["simbas_band_duality"].get<bool>());
  }
}

TEST(CliAnalyze, RepeatAndThreadCountGiveIdenticalOutputs) {
  const fs::path dir = toy_dataset("cli_repeat");
  const std::string base = "analyze " + inputs(dir) + " --tau 0.3 --tau 0.7 --contrast 1 --mc-draws 3000 ";
  ASSERT_EQ(cli(base + "--seed 99 --threads 1 --out " + (dir / "a").string(), dir / "a.log").status, 0);
  ASSERT_EQ(cli(base + "--seed 99 --threads 1 --out " + (dir / "b").string(), dir / "b.log").status, 0);
  ASSERT_EQ(cli(base + "--seed 99 --threads 8 --out " + (dir / "c").string(), dir / "c.log").status, 0);
  EXPECT_EQ(deterministic_part(dir / "a"), deterministic_part(dir / "b"));
  EXPECT_EQ(deterministic_part(dir / "a"), deterministic_part(dir / "c"));
  const CliRun other = cli(base + "--seed 100 --out " + (dir / "d").string(), dir / "d.log");
  ASSERT_EQ(other.status, 0);
  EXPECT_NE(deterministic_part(dir / "a"), deterministic_part(dir / "d"));
}

TEST(CliAnalyze, EmbeddedConfigReproducesRun) {
  const fs::path dir = toy_dataset("cli_rerun");
  ASSERT_EQ(cli("analyze " + inputs(dir) + " --tau 0.4 --contrast 1 --mc-draws 2000 --seed 3 --no-wavelet-smooth --out " +
                    (dir / "a").string(), dir / "a.log").status, 0);
  ASSERT_EQ(cli("analyze --from-manifest " + (dir / "a" / "manifest.json").string() + " --out " + (dir / "b").string(),
                dir / "b.log").status, 0);
  EXPECT_FALSE(manifest(dir / "b")["config"]["wavelet_smooth"].get<bool>());
  EXPECT_EQ(deterministic_part(dir / "a"), deterministic_part(dir / "b"));
}

TEST(CliAnalyze, EveryMethodKeepsDuality) {
  const fs::path dir = toy_dataset("cli_methods", 40, 12);
  for (const std::string method : {"li", "spline2", "presmooth-li", "bayes-gp"}) {
    const fs::path out = dir / method;
    const CliRun r = cli("analyze " + inputs(dir) + " --contrast 1 --mc-draws 2000 --method " + method +
                      " --dump-sigma --out " + out.string(), dir / (method + ".log"));
    ASSERT_EQ(r.status, 0) << method << ": " << r.output;
    const json m = manifest(out);
    EXPECT_TRUE(m["curves"][0]["simbas_band_duality"].get<bool>()) << method;
    EXPECT_EQ(m["curves"][0]["gp"].is_null(), method != "bayes-gp");
    EXPECT_TRUE(fs::exists(out / "curve_tau0_contrast0_sigma_raw.csv"));
  }
}

TEST(CliAnalyze, ErrorsGiveNonzeroStatus) {
  const fs::path dir = toy_dataset("cli_errors");
  const std::string base = "analyze " + inputs(dir) + " --mc-draws 2000 --out " + (dir / "o").string();
  CliRun r = cli(base + " --method cubic", dir / "1.log");
  EXPECT_NE(r.status, 0);
  EXPECT_NE(r.output.find("unknown method"), std::string::npos);
  r = cli(base + " --contrast 5", dir / "2.log");
  EXPECT_NE(r.status, 0);
  EXPECT_NE(r.output.find("contrast index 5"), std::string::npos);
  r = cli(base + " --tau 1.5", dir / "3.log");
  EXPECT_NE(r.status, 0);
  r = cli("analyze --responses " + (dir / "missing.csv").string() + " --design x --grid t", dir / "4.log");
  EXPECT_NE(r.status, 0);
  EXPECT_NE(r.output.find("load"), std::string::npos);
}

TEST(CliAnalyze, SparseGridWarning) {
  const fs::path dir = toy_dataset("cli_sparse", 100, 6);
  const CliRun r = cli("analyze " + inputs(dir) + " --contrast 1 --mc-draws 2000 --out " + (dir / "o").string(),
                    dir / "log.txt");
  ASSERT_EQ(r.status, 0) << r.output;
  EXPECT_NE(r.output.find("sparse"), std::string::npos);
  EXPECT_EQ(manifest(dir / "o")["warnings"].size(), 1u);
}

TEST(CliSimulate, SmallStudyWithOverrides) {
  const fs::path dir = test::scratch_dir("cli_sim");
  const CliRun r = cli("simulate --scenario continuous --seed 7 --replicates 2 --n 100 --T 32 --methods li --taus 0.5 "
                    "--mc-draws 2000 --out " + (dir / "o").string(), dir / "log.txt");
  ASSERT_EQ(r.status, 0) << r.output;
  std::ifstream in(dir / "o" / "study.csv");
  std::string header, line;
  std::getline(in, header);
  EXPECT_EQ(header.rfind("scenario,n,T,tau,coefficient,method", 0), 0u);
  int rows = 0;
  while (std::getline(in, line)) {
    ++rows;
    EXPECT_EQ(line.rfind("continuous,100,32,", 0), 0u) << line;
  }
  EXPECT_EQ(rows, 2);
  const json m = manifest(dir / "o");
  EXPECT_EQ(m["scenario"]["n"].get<int>(), 100);
  EXPECT_EQ(m["scenario"]["T"].get<int>(), 32);
  EXPECT_EQ(m["failures"].get<int>(), 0);
  EXPECT_TRUE(fs::exists(dir / "o" / "replicates.csv"));
}

TEST(CliSimulate, UnknownScenarioListsNames) {
  const fs::path dir = test::scratch_dir("cli_sim_bad");
  const CliRun r = cli("simulate --scenario wiggly --seed 1 --out " + (dir / "o").string(), dir / "log.txt");
  EXPECT_NE(r.status, 0);
  EXPECT_NE(r.output.find("continuous"), std::string::npos);
  EXPECT_NE(r.output.find("binary"), std::string::npos);
  EXPECT_NE(cli("simulate --scenario continuous --out " + (dir / "o").string(), dir / "log2.txt").status, 0);
}

TEST(CliSimulate, ThreadCountDoesNotChangeResults) {
  const fs::path dir = test::scratch_dir("cli_sim_threads");
  const std::string base = "simulate --scenario binary --seed 11 --replicates 3 --n 80 --T 16 --methods li "
                           "--taus 0.5 --mc-draws 2000 ";
  ASSERT_EQ(cli(base + "--threads 1 --out " + (dir / "a").string(), dir / "a.log").status, 0);
  ASSERT_EQ(cli(base + "--threads 8 --out " + (dir / "b").string(), dir / "b.log").status, 0);
  EXPECT_EQ(slurp(dir / "a" / "study.csv"), slurp(dir / "b" / "study.csv"));
  EXPECT_EQ(slurp(dir / "a" / "replicates.csv"), slurp(dir / "b" / "replicates.csv"));
}
