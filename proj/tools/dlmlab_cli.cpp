// dlmlab command-line front end. Exit codes: 0 success, 2 configuration or
// usage error, 3 numerical failure.

#include <cstdint>
#include <filesystem>
#include <fstream>
#include <iostream>
#include <optional>
#include <string>
#include <vector>

#include "CLI11.hpp"

#include "dlmlab/experiment.hpp"

namespace fs = std::filesystem;
using namespace dlmlab;

namespace {

constexpr int kExitOk = 0;
constexpr int kExitConfig = 2;
constexpr int kExitNumerical = 3;

struct Common {
  std::string config;
  std::optional<std::uint64_t> seed;
  std::optional<std::size_t> threads;
  std::string out = ".";
  std::string data_dir;
};

struct RankFlags {
  std::string variant = "one_hidden";
  std::vector<std::size_t> widths{4, 5, 1};
  std::size_t samples = 20;
  std::size_t trials = 100;
  std::size_t redraws = 10;
  double rel_tol = kDefaultRankTol;
  bool adversarial = false;
};

struct OracleFlags {
  std::vector<std::size_t> widths{3, 2, 2, 1};
  std::size_t samples = 4;
};

ExperimentConfig load(const Common& c) {
  if (c.config.empty()) throw ConfigError("--config is required for this command");
  ExperimentConfig cfg = load_config(c.config);
  if (c.seed) cfg.seed = *c.seed;
  if (c.threads) cfg.threads = *c.threads;
  return cfg;
}

fs::path out_dir(const Common& c) {
  fs::path p(c.out);
  fs::create_directories(p);
  return p;
}

void write_json(const fs::path& path, const Json& j) {
  std::ofstream f(path);
  if (!f) throw ConfigError("cannot write " + path.string());
  f << j.dump(2) << "\n";
  std::cout << j.dump(2) << "\n";
}

template <typename Writer>
void write_csv(const fs::path& path, Writer&& w) {
  std::ofstream f(path);
  if (!f) throw ConfigError("cannot write " + path.string());
  w(f);
}

struct Prepared {
  std::uint64_t seed;
  Dataset data;
  Weights init;
  NoiseTensors noise;
};

Prepared prepare(const ExperimentConfig& cfg, const Common& c) {
  require_network(cfg.network);
  const std::uint64_t seed = row_seed(cfg.seed, 0, 0);
  Dataset data = build_dataset(cfg.data, cfg.network.widths.front(),
                               resolve_data_dir(c.data_dir, cfg.data_dir), seed);
  Weights init = build_init(cfg.init, cfg.network, seed);
  NoiseTensors noise = build_noise(cfg.network, data.samples(), seed);
  return {seed, std::move(data), std::move(init), std::move(noise)};
}

TrainConfig checked_train(const ExperimentConfig& cfg, std::uint64_t seed) {
  if (!cfg.train) throw ConfigError("train: section required for this command");
  TrainConfig tc = *cfg.train;
  tc.seed = seed;
  try {
    tc.validate(cfg.network.depth());
  } catch (const PreconditionError& e) {
    throw ConfigError(e.what());
  }
  return tc;
}

int cmd_train(const Common& c) {
  const ExperimentConfig cfg = load(c);
  const Prepared p = prepare(cfg, c);
  const TrainConfig tc = checked_train(cfg, p.seed);
  const TrainResult r = train(tc, p.data, cfg.network, p.init, p.noise);
  const fs::path dir = out_dir(c);
  write_csv(dir / "train_log.csv", [&](std::ostream& o) { write_train_log_csv(o, r.log); });
  Json j;
  j["command"] = "train";
  j["seed"] = cfg.seed;
  j["row_seed"] = p.seed;
  j["status"] = to_string(r.log.status);
  if (!r.log.diagnostic.empty()) j["diagnostic"] = r.log.diagnostic;
  j["epochs_run"] = r.log.epochs_run();
  j["initial_mse"] = json_number(r.log.initial().mse);
  j["final_mse"] = json_number(r.log.last().mse);
  j["final_mce"] = json_number(r.log.last().mce);
  j["grad_norm"] = json_number(r.log.last().grad_norm);
  j["min_abs_u"] = json_number(r.log.last().min_abs_u);
  write_json(dir / "train_summary.json", j);
  return r.log.status == TrainStatus::aborted_nonfinite ? kExitNumerical : kExitOk;
}

int cmd_sweep(const Common& c) {
  const ExperimentConfig cfg = load(c);
  const auto rows = run_sweep(cfg, resolve_data_dir(c.data_dir, cfg.data_dir));
  const fs::path dir = out_dir(c);
  write_csv(dir / "sweep.csv", [&](std::ostream& o) { write_sweep_csv(o, rows); });
  Json j = sweep_summary(rows);
  j["seed"] = cfg.seed;
  write_json(dir / "sweep_summary.json", j);
  return sweep_succeeded(rows) ? kExitOk : kExitNumerical;
}

int cmd_probe(const Common& c) {
  const ExperimentConfig cfg = load(c);
  const Prepared p = prepare(cfg, c);
  const ProbeResult r = dlm_probe(cfg.probe, p.data, cfg.network, p.init, p.noise);
  const fs::path dir = out_dir(c);
  write_csv(dir / "probe_trajectory.csv", [&](std::ostream& o) { write_probe_csv(o, r.log); });
  Json j;
  j["command"] = "dlm-probe";
  j["seed"] = cfg.seed;
  j["row_seed"] = p.seed;
  j["train_status"] = to_string(r.log.status);
  j["epochs_run"] = r.log.epochs_run();
  j["certificate"] = to_json(r.certificate);
  write_json(dir / "certificate.json", j);
  return r.certificate.verdict == Verdict::inconsistent_with_theorem ? kExitNumerical : kExitOk;
}

int cmd_hessian_audit(const Common& c) {
  const ExperimentConfig cfg = load(c);
  const Prepared p = prepare(cfg, c);
  Weights w = p.init;
  Json j;
  j["command"] = "hessian-audit";
  j["seed"] = cfg.seed;
  if (cfg.network.parameter_count() > cfg.hessian.max_omega) {
    throw ConfigError("hessian-audit: omega = " + std::to_string(cfg.network.parameter_count()) +
                      " exceeds hessian.max_omega = " + std::to_string(cfg.hessian.max_omega) +
                      "; use a smaller network or raise the cap");
  }
  if (cfg.train) {
    const TrainResult r = train(checked_train(cfg, p.seed), p.data, cfg.network, w, p.noise);
    if (r.log.status == TrainStatus::aborted_nonfinite) throw NonFiniteError(r.log.diagnostic);
    w = r.weights;
    j["trained_epochs"] = r.log.epochs_run();
    j["final_mse"] = json_number(r.log.last().mse);
  }
  j["audit"] = to_json(hessian_audit(w, p.data, p.noise, cfg.network, cfg.hessian));
  write_json(out_dir(c) / "hessian_audit.json", j);
  return kExitOk;
}

int cmd_rank_test(const Common& c, const RankFlags& f) {
  AeCheckSpec spec;
  if (f.variant == "one_hidden") {
    spec.variant = AeVariant::one_hidden;
  } else if (f.variant == "deep") {
    spec.variant = AeVariant::deep;
  } else if (f.variant == "weakened") {
    spec.variant = AeVariant::weakened;
  } else {
    throw ConfigError("--variant: expected one_hidden, deep or weakened, got " + f.variant);
  }
  spec.widths = f.widths;
  spec.samples = f.samples;
  spec.trials = f.trials;
  spec.weight_redraws = f.redraws;
  spec.rel_tol = f.rel_tol;
  spec.duplicate_columns = f.adversarial;
  try {
    validate_ae_spec(spec);
  } catch (const PreconditionError& e) {
    throw ConfigError(e.what());
  }
  const std::uint64_t seed = c.seed.value_or(0);
  const AeCheckResult r = randomized_ae_check(spec, seed, c.threads.value_or(1));
  Json j = to_json(spec, r);
  j["seed"] = seed;
  write_json(out_dir(c) / "rank_test.json", j);
  return r.passed ? kExitOk : kExitNumerical;
}

int cmd_construction_oracle(const Common& c, const OracleFlags& f) {
  ConstructionReport r;
  try {
    r = construction_oracle(f.widths, f.samples);
  } catch (const PreconditionError& e) {
    throw ConfigError(e.what());
  }
  write_json(out_dir(c) / "construction.json", to_json(r));
  return r.passed ? kExitOk : kExitNumerical;
}

void add_common(CLI::App* sub, Common& c, bool with_config) {
  if (with_config) sub->add_option("--config", c.config, "JSON experiment config")->required();
  sub->add_option("--seed", c.seed, "master seed (overrides the config)");
  sub->add_option("--threads", c.threads, "worker threads for repetitions");
  sub->add_option("--out", c.out, "output directory")->capture_default_str();
  sub->add_option("--data-dir", c.data_dir, "MNIST directory (else config data_dir, else MNN_DATA_DIR)");
}

}  // namespace

int main(int argc, char** argv) {
  CLI::App app{"dlmlab: loss-surface laboratory for piecewise-linear networks"};
  app.require_subcommand(1);
  Common common;
  RankFlags rank;
  OracleFlags oracle;

  auto* train_cmd = app.add_subcommand("train", "train one network and log every epoch");
  add_common(train_cmd, common, true);
  auto* sweep_cmd = app.add_subcommand("sweep", "final training error over a (d, N) grid");
  add_common(sweep_cmd, common, true);
  auto* probe_cmd = app.add_subcommand("dlm-probe", "GD with a decaying rate, then certify the end point");
  add_common(probe_cmd, common, true);
  auto* audit_cmd = app.add_subcommand("hessian-audit", "analytic Hessian checks at the configured point");
  add_common(audit_cmd, common, true);

  auto* rank_cmd = app.add_subcommand("rank-test", "randomized full-rank check of the gradient matrix");
  add_common(rank_cmd, common, false);
  rank_cmd->add_option("--variant", rank.variant, "one_hidden | deep | weakened")->capture_default_str();
  rank_cmd->add_option("--widths", rank.widths, "d_0,...,d_L")->delimiter(',');
  rank_cmd->add_option("--samples", rank.samples, "N")->capture_default_str();
  rank_cmd->add_option("--trials", rank.trials)->capture_default_str();
  rank_cmd->add_option("--redraws", rank.redraws, "weight redraws per trial")->capture_default_str();
  rank_cmd->add_option("--rel-tol", rank.rel_tol, "relative singular value cutoff")->capture_default_str();
  rank_cmd->add_flag("--adversarial", rank.adversarial, "duplicate two input columns (must fail)");

  auto* oracle_cmd = app.add_subcommand("construction-oracle", "rank of the explicit full-rank witness");
  add_common(oracle_cmd, common, false);
  oracle_cmd->add_option("--widths", oracle.widths, "d_0,...,d_L with L >= 3")->delimiter(',');
  oracle_cmd->add_option("--samples", oracle.samples, "N <= d_{L-2} d_{L-1}")->capture_default_str();

  try {
    app.parse(argc, argv);
  } catch (const CLI::ParseError& e) {
    const int rc = app.exit(e);
    return rc == 0 ? kExitOk : kExitConfig;
  }

  try {
    if (train_cmd->parsed()) return cmd_train(common);
    if (sweep_cmd->parsed()) return cmd_sweep(common);
    if (probe_cmd->parsed()) return cmd_probe(common);
    if (audit_cmd->parsed()) return cmd_hessian_audit(common);
    if (rank_cmd->parsed()) return cmd_rank_test(common, rank);
    if (oracle_cmd->parsed()) return cmd_construction_oracle(common, oracle);
  } catch (const ConfigError& e) {
    std::cerr << "config error: " << e.what() << "\n";
    return kExitConfig;
  } catch (const PreconditionError& e) {
    std::cerr << "invalid input: " << e.what() << "\n";
    return kExitConfig;
  } catch (const DimensionError& e) {
    std::cerr << "invalid input: " << e.what() << "\n";
    return kExitConfig;
  } catch (const IdxFormatError& e) {
    std::cerr << "data error: " << e.what() << "\n";
    return kExitConfig;
  } catch (const fs::filesystem_error& e) {
    std::cerr << "file error: " << e.what() << "\n";
    return kExitConfig;
  } catch (const std::exception& e) {
    std::cerr << "numerical failure: " << e.what() << "\n";
    return kExitNumerical;
  }
  return kExitConfig;
}
