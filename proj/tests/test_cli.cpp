#include <gtest/gtest.h>

#include <cstdlib>
#include <filesystem>
#include <fstream>
#include <sstream>
#include <sys/wait.h>

#include "json.hpp"

namespace fs = std::filesystem;
using Json = nlohmann::json;

namespace {

struct CliRun {
  int code = -1;
  fs::path out;
  std::string stderr_text;
};

CliRun run(const std::string& name, const std::string& args) {
  CliRun r;
  r.out = fs::temp_directory_path() / ("dlmlab_cli_" + name);
  fs::remove_all(r.out);
  fs::create_directories(r.out);
  const std::string cmd = std::string("\"") + DLMLAB_CLI + "\" " + args + " --out \"" + r.out.string() +
                          "\" > \"" + (r.out / "stdout").string() + "\" 2> \"" + (r.out / "stderr").string() + "\"";
  const int status = std::system(cmd.c_str());
  r.code = WIFEXITED(status) ? WEXITSTATUS(status) : -1;
  std::ifstream err(r.out / "stderr");
  std::stringstream ss;
  ss << err.rdbuf();
  r.stderr_text = ss.str();
  return r;
}

std::string config(const std::string& file) { return std::string("--config \"") + DLMLAB_TEST_CONFIGS + "/" + file + "\""; }

Json read_json(const fs::path& p) {
  std::ifstream in(p);
  return Json::parse(in);
}

std::vector<std::string> read_lines(const fs::path& p) {
  std::ifstream in(p);
  std::vector<std::string> lines;
  for (std::string l; std::getline(in, l);) lines.push_back(l);
  return lines;
}

}  // namespace

TEST(CliTrain, ZeroRateSmokeLogIsConstant) {
  const CliRun r = run("train_lr0", "train " + config("train_lr0.json"));
  ASSERT_EQ(r.code, 0) << r.stderr_text;
  const auto lines = read_lines(r.out / "train_log.csv");
  ASSERT_EQ(lines.size(), 2u + 11u);
  EXPECT_EQ(lines[0], "# schema: dlmlab.train_log/1");
  EXPECT_EQ(lines[1], "epoch,mse,mce,grad_norm,min_abs_u,lr");
  const Json s = read_json(r.out / "train_summary.json");
  EXPECT_EQ(s["initial_mse"], s["final_mse"]);
  EXPECT_EQ(s["epochs_run"], 10);
}

TEST(CliTrain, TwoLayerCriticalSampleCount) {
  const CliRun r = run("train_two_layer", "train " + config("train_two_layer.json"));
  ASSERT_EQ(r.code, 0) << r.stderr_text;
  EXPECT_LT(read_json(r.out / "train_summary.json")["final_mse"].get<double>(), 1e-6);
}

TEST(CliTrain, MissingDatasetIsAConfigError) {
  const CliRun r = run("train_missing", "train " + config("train_missing_mnist.json") + " --data-dir /nonexistent_mnist");
  EXPECT_EQ(r.code, 2);
  EXPECT_NE(r.stderr_text.find("/nonexistent_mnist/no-such-images-idx3-ubyte"), std::string::npos) << r.stderr_text;
}

TEST(CliTrain, UnknownKeyAndUsageErrors) {
  const CliRun bad = run("bad_key", "train " + config("bad_key.json"));
  EXPECT_EQ(bad.code, 2);
  EXPECT_NE(bad.stderr_text.find("leaky_slop"), std::string::npos);
  EXPECT_EQ(run("no_config", "train").code, 2);
  EXPECT_EQ(run("no_command", "").code, 2);
}

TEST(CliSweep, SmokeGridIsReproducible) {
  const CliRun a = run("sweep_a", "sweep " + config("sweep_smoke.json"));
  const CliRun b = run("sweep_b", "sweep " + config("sweep_smoke.json") + " --threads 2");
  ASSERT_EQ(a.code, 0) << a.stderr_text;
  ASSERT_EQ(b.code, 0) << b.stderr_text;
  auto strip = [](std::vector<std::string> lines) {
    for (auto& l : lines) l = l.substr(0, l.rfind(','));
    return lines;
  };
  const auto la = read_lines(a.out / "sweep.csv");
  ASSERT_EQ(la.size(), 4u);
  EXPECT_EQ(la[0], "# schema: dlmlab.sweep/1");
  EXPECT_EQ(strip(la), strip(read_lines(b.out / "sweep.csv")));
  const Json s = read_json(a.out / "sweep_summary.json");
  EXPECT_EQ(s["rows"], 2);
  EXPECT_EQ(s["cells"][0]["d2_over_N"], 2.0);
}

TEST(CliProbe, LinearConsistentSystem) {
  const CliRun r = run("probe_linear", "dlm-probe " + config("probe_linear.json"));
  ASSERT_EQ(r.code, 0) << r.stderr_text;
  EXPECT_EQ(read_json(r.out / "certificate.json")["certificate"]["verdict"], "dlm_zero_loss");
  const auto lines = read_lines(r.out / "probe_trajectory.csv");
  EXPECT_EQ(lines[0], "# schema: dlmlab.probe_trajectory/1");
  EXPECT_EQ(lines[1], "epoch,lr,mse,min_abs_u");
}

TEST(CliProbe, InfeasibleTinyNet) {
  const CliRun r = run("probe_tiny", "dlm-probe " + config("probe_tiny.json"));
  ASSERT_EQ(r.code, 0) << r.stderr_text;
  const std::string v = read_json(r.out / "certificate.json")["certificate"]["verdict"];
  EXPECT_TRUE(v == "dlm_nonzero_loss" || v == "not_converged") << v;
}

// d_0 = d_1 = 25, N = 100, plain ReLU.
TEST(CliProbe, ReluSetupReachesDifferentiableZeroLoss) {
  const CliRun r = run("probe_relu", "dlm-probe " + config("probe_relu_25.json"));
  ASSERT_EQ(r.code, 0) << r.stderr_text;
  const Json c = read_json(r.out / "certificate.json")["certificate"];
  EXPECT_EQ(c["verdict"], "dlm_zero_loss") << c.dump();
}

TEST(CliRankTest, DefaultsPass) {
  const CliRun r = run("rank_default", "rank-test");
  ASSERT_EQ(r.code, 0) << r.stderr_text;
  const Json j = read_json(r.out / "rank_test.json");
  EXPECT_EQ(j["cases"], 1000);
  EXPECT_EQ(j["full_rank_cases"], 1000);
}

TEST(CliRankTest, AdversarialFailsWithSeeds) {
  const CliRun r = run("rank_adv", "rank-test --adversarial --trials 3 --redraws 2");
  EXPECT_EQ(r.code, 3);
  const Json j = read_json(r.out / "rank_test.json");
  EXPECT_EQ(j["passed"], false);
  ASSERT_EQ(j["counterexamples"].size(), 6u);
  EXPECT_TRUE(j["counterexamples"][0].contains("trial_seed"));
}

TEST(CliRankTest, WeakenedVariantAndPreconditions) {
  EXPECT_EQ(run("rank_weak", "rank-test --variant weakened --widths 3,4,5,1 --samples 15 --trials 20").code, 0);
  EXPECT_EQ(run("rank_weak_big", "rank-test --variant weakened --widths 3,4,5,1 --samples 16").code, 2);
  EXPECT_EQ(run("rank_bad_variant", "rank-test --variant nope").code, 2);
}

TEST(CliAudit, ZeroWeightsDeepNet) {
  const CliRun r = run("audit_zero", "hessian-audit " + config("audit_zero.json"));
  ASSERT_EQ(r.code, 0) << r.stderr_text;
  EXPECT_EQ(read_json(r.out / "hessian_audit.json")["audit"]["identically_zero"], true);
}

TEST(CliAudit, TrainedPoint) {
  const CliRun r = run("audit_trained", "hessian-audit " + config("audit_trained.json"));
  ASSERT_EQ(r.code, 0) << r.stderr_text;
  const Json a = read_json(r.out / "hessian_audit.json")["audit"];
  EXPECT_LT(a["trace_residual"].get<double>(), 1e-10 * a["gram_trace"].get<double>());
  EXPECT_GE(a["min_eig"].get<double>(), -1e-6 * std::abs(a["max_eig"].get<double>()));
}

TEST(CliAudit, OmegaCapIsAConfigError) {
  const CliRun r = run("audit_cap", "hessian-audit " + config("audit_cap.json"));
  EXPECT_EQ(r.code, 2);
  EXPECT_NE(r.stderr_text.find("max_omega"), std::string::npos);
}

TEST(CliOracle, SmallWitness) {
  const CliRun r = run("oracle", "construction-oracle --widths 3,2,2,1 --samples 4");
  ASSERT_EQ(r.code, 0) << r.stderr_text;
  const Json j = read_json(r.out / "construction.json");
  EXPECT_EQ(j["rank"], 4);
  EXPECT_EQ(j["pass"], true);
  EXPECT_EQ(run("oracle_bad", "construction-oracle --widths 3,2,1 --samples 2").code, 2);
}
