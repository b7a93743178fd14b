#include <gtest/gtest.h>

#include <cstdlib>
#include <filesystem>
#include <fstream>
#include <map>
#include <sstream>
#include <sys/wait.h>

#include "reqdiag/pipeline.hpp"

using namespace reqdiag;
namespace fs = std::filesystem;

namespace {

std::string slurp(const fs::path& p) {
  std::ifstream f(p, std::ios::binary);
  return {std::istreambuf_iterator<char>(f), {}};
}

// Relative path -> contents for every regular file under dir.
std::map<std::string, std::string> snapshot(const fs::path& dir) {
  std::map<std::string, std::string> out;
  for (const auto& e : fs::recursive_directory_iterator(dir)) {
    if (e.is_regular_file()) out[fs::relative(e.path(), dir).string()] = slurp(e.path());
  }
  return out;
}

std::map<std::string, fs::file_time_type> mtimes(const fs::path& dir) {
  std::map<std::string, fs::file_time_type> out;
  for (const auto& e : fs::recursive_directory_iterator(dir)) {
    if (e.is_regular_file()) out[fs::relative(e.path(), dir).string()] = e.last_write_time();
  }
  return out;
}

fs::path scratch(const std::string& name) {
  const auto p = fs::temp_directory_path() / ("reqdiag_test_cli_" + name);
  fs::remove_all(p);
  return p;
}

struct Run {
  int status;
  std::string output;
};

Run cli(const std::string& args) {
  const auto log = fs::temp_directory_path() / "reqdiag_test_cli_output.txt";
  const std::string cmd = std::string("\"") + REQDIAG_CLI_PATH + "\" " + args + " > \"" + log.string() + "\" 2>&1";
  const int raw = std::system(cmd.c_str());
  Run r{WIFEXITED(raw) ? WEXITSTATUS(raw) : -1, slurp(log)};
  fs::remove(log);
  return r;
}

PipelineConfig seed42(const fs::path& out, std::size_t n = 1000) {
  PipelineConfig c;
  c.out = out;
  c.threads = 2;
  c.workload.n_requests = n;
  return c;
}

}  // namespace

TEST(Cli, DetectWithoutExtractNamesTheStage) {
  const auto dir = scratch("empty");
  fs::create_directories(dir);
  PipelineConfig c;
  c.in = dir;
  std::ostringstream err;
  EXPECT_EQ(run_detect(c, err), 1);
  EXPECT_NE(err.str().find("run the 'extract' stage first"), std::string::npos) << err.str();

  const auto r = cli("detect --in \"" + dir.string() + "\"");
  EXPECT_EQ(r.status, 1);
  EXPECT_NE(r.output.find("'extract'"), std::string::npos) << r.output;
  fs::remove_all(dir);
}

TEST(Cli, ReportWithoutClusterNamesTheStage) {
  const auto dir = scratch("partial");
  auto c = seed42(dir, 200);
  c.workload.n_requests = 200;
  std::ostringstream err;
  c.out = dir / "t.txt";
  fs::create_directories(dir);
  ASSERT_EQ(run_generate(c, err), 0);
  c.in = dir / "t.txt";
  c.out = dir;
  ASSERT_EQ(run_extract(c, err), 0);
  c.in = dir;
  ASSERT_EQ(run_detect(c, err), 0);
  std::ostringstream e2;
  EXPECT_EQ(run_report(c, e2), 1);
  EXPECT_NE(e2.str().find("'cluster'"), std::string::npos) << e2.str();
  fs::remove_all(dir);
}

TEST(Cli, HelpOnEverySubcommand) {
  const std::vector<std::string> common{"--in",         "--out", "--seed",          "--threads", "--feature-set", "--epsilon",
                                        "--min-points", "--k",   "--k-range",      "--n-neighbors", "--standardize"};
  for (const char* sub : {"generate", "extract", "detect", "cluster", "report", "all"}) {
    const auto r = cli(std::string(sub) + " --help");
    EXPECT_EQ(r.status, 0) << sub;
    for (const auto& flag : common) EXPECT_NE(r.output.find(flag), std::string::npos) << sub << ' ' << flag;
  }
  const auto g = cli("generate --help");
  for (const char* flag : {"--requests", "--anomaly-rate", "--mix", "--truth"}) EXPECT_NE(g.output.find(flag), std::string::npos);
  EXPECT_EQ(cli("--help").status, 0);
}

TEST(Cli, BadInvocationsExitOne) {
  EXPECT_EQ(cli("").status, 1);
  EXPECT_EQ(cli("frobnicate").status, 1);
  EXPECT_EQ(cli("detect --no-such-flag").status, 1);
  EXPECT_EQ(cli("detect --min-points many").status, 1);
  EXPECT_EQ(cli("detect --feature-set words --in .").status, 1);
  EXPECT_EQ(cli("cluster --k-range 5-2 --in .").status, 1);
  EXPECT_EQ(cli("generate --mix 1,2 --out x").status, 1);
  EXPECT_EQ(cli("extract --in /nonexistent/trace.txt --out /tmp").status, 1);
}

TEST(Cli, MalformedTraceExitsOneWithLine) {
  const auto dir = scratch("malformed");
  fs::create_directories(dir);
  std::ofstream(dir / "t.txt") << "10\t1\trequest_start\treq=1\nbogus line\n";
  const auto r = cli("extract --in \"" + (dir / "t.txt").string() + "\" --out \"" + dir.string() + "\"");
  EXPECT_EQ(r.status, 1);
  EXPECT_NE(r.output.find("line 2"), std::string::npos) << r.output;
  fs::remove_all(dir);
}

TEST(Cli, GenerateWritesTraceAndTruth) {
  const auto dir = scratch("gen");
  fs::create_directories(dir);
  const auto r = cli("generate --seed 42 --requests 300 --anomaly-rate 0.05 --mix 1,1,1 --out \"" + (dir / "t.txt").string() +
                     "\" --truth \"" + (dir / "truth.tsv").string() + "\"");
  ASSERT_EQ(r.status, 0) << r.output;
  std::ifstream tf(dir / "truth.tsv");
  EXPECT_EQ(GroundTruth::read(tf).requests.size(), 300u);
  WorkloadConfig cfg;
  cfg.n_requests = 300;
  cfg.anomaly_rate = 0.05;
  EXPECT_EQ(slurp(dir / "t.txt"), generate_to_string(cfg).first);
  fs::remove_all(dir);
}

class Seed42Bundle : public ::testing::Test {
 protected:
  static void SetUpTestSuite() {
    dir_ = new fs::path(scratch("all"));
    std::ostringstream err;
    ASSERT_EQ(run_all(seed42(*dir_), err), 0) << err.str();
  }
  static void TearDownTestSuite() {
    fs::remove_all(*dir_);
    delete dir_;
  }
  static fs::path* dir_;
};
fs::path* Seed42Bundle::dir_ = nullptr;

TEST_F(Seed42Bundle, ProducesEveryFile) {
  for (const char* f : {"trace.txt", "truth.tsv", "requests.tsv", "state_counts.csv", "state_durations.csv", "syscall_bow.csv",
                        "sequences.tsv", "labels.tsv", "clusters.tsv", "inertia.tsv", "report/summary.json", "report/report.md",
                        "report/projection.csv", "report/inertia.csv", "report/distributions.csv"}) {
    EXPECT_TRUE(fs::exists(*dir_ / f)) << f;
  }
}

// Frozen from a verified run: 11 injected anomalies, all recovered, three clusters.
TEST_F(Seed42Bundle, Golden) {
  const fs::path golden = fs::path(REQDIAG_GOLDEN_DIR) / "all_seed42";
  const std::vector<std::string> files{"labels.tsv", "clusters.tsv", "report/summary.json", "report/report.md"};
  if (std::getenv("REQDIAG_UPDATE_GOLDEN")) {
    fs::create_directories(golden / "report");
    for (const auto& f : files) fs::copy_file(*dir_ / f, golden / f, fs::copy_options::overwrite_existing);
  }
  for (const auto& f : files) {
    ASSERT_TRUE(fs::exists(golden / f)) << f;
    EXPECT_EQ(slurp(*dir_ / f), slurp(golden / f)) << f;
  }
}

TEST_F(Seed42Bundle, EqualsManualStageSequence) {
  const auto dir = scratch("manual");
  fs::create_directories(dir);
  const std::string d = "\"" + dir.string() + "\"";
  const std::string common = " --threads 2";
  ASSERT_EQ(cli("generate --out " + (dir / "trace.txt").string() + " --truth " + (dir / "truth.tsv").string() + common).status, 0);
  ASSERT_EQ(cli("extract --in " + (dir / "trace.txt").string() + " --out " + d + common).status, 0);
  ASSERT_EQ(cli("detect --in " + d + common).status, 0);
  ASSERT_EQ(cli("cluster --in " + d + common).status, 0);
  ASSERT_EQ(cli("report --in " + d + " --truth " + (dir / "truth.tsv").string() + common).status, 0);
  EXPECT_EQ(snapshot(dir), snapshot(*dir_));
  fs::remove_all(dir);
}

TEST_F(Seed42Bundle, ThreadCountDoesNotChangeOutputs) {
  const auto dir = scratch("threads");
  auto c = seed42(dir);
  c.threads = 1;
  std::ostringstream err;
  ASSERT_EQ(run_all(c, err), 0);
  EXPECT_EQ(snapshot(dir), snapshot(*dir_));
  fs::remove_all(dir);
}

TEST_F(Seed42Bundle, DownstreamStagesLeaveUpstreamUntouched) {
  const auto dir = scratch("rerun");
  fs::copy(*dir_, dir, fs::copy_options::recursive);
  const auto before = snapshot(dir);
  const auto times = mtimes(dir);
  PipelineConfig c;
  c.in = dir;
  c.threads = 2;
  c.epsilon = 80.0;
  std::ostringstream err;
  ASSERT_EQ(run_detect(c, err), 0);
  ASSERT_EQ(run_cluster(c, err), 0);
  ASSERT_EQ(run_report(c, err), 0);
  const auto after = snapshot(dir);
  const auto times_after = mtimes(dir);
  for (const char* f : {"trace.txt", "truth.tsv", "requests.tsv", "state_counts.csv", "state_durations.csv", "syscall_bow.csv",
                        "sequences.tsv"}) {
    EXPECT_EQ(after.at(f), before.at(f)) << f;
    EXPECT_EQ(times_after.at(f), times.at(f)) << f;
  }
  // Re-running report alone leaves detection and clustering as they are.
  const auto mid = snapshot(dir);
  ASSERT_EQ(run_report(c, err), 0);
  const auto last = snapshot(dir);
  for (const char* f : {"labels.tsv", "clusters.tsv", "inertia.tsv"}) EXPECT_EQ(last.at(f), mid.at(f)) << f;
  fs::remove_all(dir);
}

TEST(Cli, ExternalTraceSkipsGeneration) {
  const auto dir = scratch("external");
  fs::create_directories(dir / "out");
  WorkloadConfig cfg;
  cfg.n_requests = 150;
  std::ofstream(dir / "t.txt") << generate_to_string(cfg).first;
  const auto r = cli("all --in \"" + (dir / "t.txt").string() + "\" --out \"" + (dir / "out").string() + "\" --no-compare");
  ASSERT_EQ(r.status, 0) << r.output;
  EXPECT_FALSE(fs::exists(dir / "out" / "trace.txt"));
  EXPECT_FALSE(fs::exists(dir / "out" / "truth.tsv"));
  EXPECT_TRUE(fs::exists(dir / "out" / "report" / "summary.json"));
  fs::remove_all(dir);
}

TEST(Cli, DumpPathsWritesPaths) {
  const auto dir = scratch("paths");
  auto c = seed42(dir, 100);
  c.dump_paths = true;
  c.compare_representations = false;
  std::ostringstream err;
  ASSERT_EQ(run_all(c, err), 0) << err.str();
  EXPECT_FALSE(slurp(dir / "paths.tsv").empty());
  fs::remove_all(dir);
}
