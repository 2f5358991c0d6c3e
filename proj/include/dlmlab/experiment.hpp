#pragma once

// Experiment harness behind the command-line tool: JSON configs, seed
// derivation, dataset/init/noise assembly, CSV and JSON writers, sweeps.
// Needs nlohmann/json on the include path (vendor/json.hpp).

#include <chrono>
#include <cmath>
#include <cstdint>
#include <cstdlib>
#include <filesystem>
#include <fstream>
#include <initializer_list>
#include <map>
#include <optional>
#include <ostream>
#include <sstream>
#include <stdexcept>
#include <string>
#include <vector>

#include "json.hpp"

#include "dlmlab/data.hpp"
#include "dlmlab/diagnostics.hpp"
#include "dlmlab/optimize.hpp"
#include "dlmlab/parallel.hpp"

namespace dlmlab {

using Json = nlohmann::ordered_json;

/// Schema violation or unusable configuration (CLI exit code 2).
class ConfigError : public std::runtime_error {
 public:
  using std::runtime_error::runtime_error;
};

enum class DataSource { synthetic, mnist };
enum class InitScheme { he_uniform, zeros };

struct DataSpec {
  DataSource source = DataSource::synthetic;
  std::size_t samples = 0;
  std::string images = "train-images-idx3-ubyte";
  std::string labels = "train-labels-idx1-ubyte";
};

struct InitSpec {
  InitScheme scheme = InitScheme::he_uniform;
  double perturb_std = 0.0;  // 0 = no perturbation
};

/// One cell override: any field left empty falls back to the base config.
struct CellOverride {
  std::size_t width = 0;
  std::size_t samples = 0;
  std::optional<double> learning_rate;
  std::optional<std::size_t> epochs;
  std::optional<std::size_t> batch_size;
};

struct SweepSpec {
  std::vector<std::size_t> widths;
  std::vector<std::size_t> samples;
  std::size_t hidden_layers = 1;
  std::vector<CellOverride> overrides;
};

struct ExperimentConfig {
  std::uint64_t seed = 0;
  std::size_t repetitions = 1;
  std::size_t threads = 1;
  MnnConfig network;  // widths may stay empty for sweeps
  DataSpec data;
  InitSpec init;
  std::optional<TrainConfig> train;
  ProbeConfig probe;
  std::optional<SweepSpec> sweep;
  HessianAuditOptions hessian;
  std::string data_dir;
};

// ---------------------------------------------------------------------------
// Parsing. Every object is checked against its key list so typos fail loudly.

namespace detail {

inline void check_keys(const Json& obj, std::initializer_list<const char*> allowed,
                       const std::string& path) {
  if (!obj.is_object()) throw ConfigError(path + ": expected an object");
  for (const auto& item : obj.items()) {
    bool known = false;
    for (const char* k : allowed) known = known || item.key() == k;
    if (!known) {
      std::string list;
      for (const char* k : allowed) list += std::string(list.empty() ? "" : ", ") + k;
      throw ConfigError(path + ": unknown key '" + item.key() + "' (allowed: " + list + ")");
    }
  }
}

inline std::string join(const std::string& path, const std::string& key) {
  return path.empty() ? key : path + "." + key;
}

inline double get_number(const Json& v, const std::string& path) {
  if (!v.is_number()) throw ConfigError(path + ": expected a number");
  const double d = v.get<double>();
  if (!std::isfinite(d)) throw ConfigError(path + ": must be finite");
  return d;
}

inline std::uint64_t get_unsigned(const Json& v, const std::string& path) {
  if (!v.is_number_unsigned()) throw ConfigError(path + ": expected a non-negative integer");
  return v.get<std::uint64_t>();
}

inline bool get_bool(const Json& v, const std::string& path) {
  if (!v.is_boolean()) throw ConfigError(path + ": expected true or false");
  return v.get<bool>();
}

inline std::string get_string(const Json& v, const std::string& path) {
  if (!v.is_string()) throw ConfigError(path + ": expected a string");
  return v.get<std::string>();
}

inline std::vector<std::size_t> get_sizes(const Json& v, const std::string& path) {
  if (!v.is_array()) throw ConfigError(path + ": expected an array of integers");
  std::vector<std::size_t> out;
  for (std::size_t i = 0; i < v.size(); ++i) {
    out.push_back(get_unsigned(v[i], path + "[" + std::to_string(i) + "]"));
  }
  return out;
}

inline MnnConfig parse_network(const Json& j, const std::string& path) {
  check_keys(j, {"widths", "leaky_slope", "noise"}, path);
  MnnConfig c;
  if (j.contains("widths")) c.widths = get_sizes(j["widths"], join(path, "widths"));
  if (j.contains("leaky_slope")) c.leaky_slope = get_number(j["leaky_slope"], join(path, "leaky_slope"));
  if (j.contains("noise")) {
    const Json& n = j["noise"];
    const std::string np = join(path, "noise");
    check_keys(n, {"mode", "mean", "stddev"}, np);
    if (n.contains("mode")) {
      const std::string m = get_string(n["mode"], join(np, "mode"));
      if (m == "off") {
        c.noise.mode = NoiseMode::off;
      } else if (m == "gaussian") {
        c.noise.mode = NoiseMode::gaussian;
      } else {
        throw ConfigError(join(np, "mode") + ": expected \"off\" or \"gaussian\", got \"" + m + "\"");
      }
    }
    if (n.contains("mean")) c.noise.mean = get_number(n["mean"], join(np, "mean"));
    if (n.contains("stddev")) c.noise.stddev = get_number(n["stddev"], join(np, "stddev"));
    if (c.noise.stddev < 0.0) throw ConfigError(join(np, "stddev") + ": must be >= 0");
  }
  return c;
}

inline DataSpec parse_data(const Json& j, const std::string& path) {
  check_keys(j, {"source", "samples", "images", "labels"}, path);
  DataSpec d;
  if (j.contains("source")) {
    const std::string s = get_string(j["source"], join(path, "source"));
    if (s == "synthetic") {
      d.source = DataSource::synthetic;
    } else if (s == "mnist") {
      d.source = DataSource::mnist;
    } else {
      throw ConfigError(join(path, "source") + ": expected \"synthetic\" or \"mnist\", got \"" + s + "\"");
    }
  }
  if (j.contains("samples")) d.samples = get_unsigned(j["samples"], join(path, "samples"));
  if (j.contains("images")) d.images = get_string(j["images"], join(path, "images"));
  if (j.contains("labels")) d.labels = get_string(j["labels"], join(path, "labels"));
  return d;
}

inline InitSpec parse_init(const Json& j, const std::string& path) {
  check_keys(j, {"scheme", "perturb_std"}, path);
  InitSpec s;
  if (j.contains("scheme")) {
    const std::string v = get_string(j["scheme"], join(path, "scheme"));
    if (v == "he_uniform") {
      s.scheme = InitScheme::he_uniform;
    } else if (v == "zeros") {
      s.scheme = InitScheme::zeros;
    } else {
      throw ConfigError(join(path, "scheme") + ": expected \"he_uniform\" or \"zeros\", got \"" + v + "\"");
    }
  }
  if (j.contains("perturb_std")) s.perturb_std = get_number(j["perturb_std"], join(path, "perturb_std"));
  if (s.perturb_std < 0.0) throw ConfigError(join(path, "perturb_std") + ": must be >= 0");
  return s;
}

inline TrainConfig parse_train(const Json& j, const std::string& path) {
  check_keys(j, {"optimizer", "learning_rate", "betas", "adam_eps", "epochs", "batch_size", "freeze",
                 "lr_decay", "min_lr", "stop_on_mce_zero", "resample_noise"},
             path);
  TrainConfig t;
  if (j.contains("optimizer")) {
    const std::string o = get_string(j["optimizer"], join(path, "optimizer"));
    if (o == "gd") {
      t.optimizer = Optimizer::gd;
    } else if (o == "adam") {
      t.optimizer = Optimizer::adam;
    } else {
      throw ConfigError(join(path, "optimizer") + ": expected \"gd\" or \"adam\", got \"" + o + "\"");
    }
  }
  if (j.contains("learning_rate")) t.learning_rate = get_number(j["learning_rate"], join(path, "learning_rate"));
  if (j.contains("betas")) {
    const Json& b = j["betas"];
    if (!b.is_array() || b.size() != 2) throw ConfigError(join(path, "betas") + ": expected [beta1, beta2]");
    t.beta1 = get_number(b[0], join(path, "betas[0]"));
    t.beta2 = get_number(b[1], join(path, "betas[1]"));
  }
  if (j.contains("adam_eps")) t.adam_eps = get_number(j["adam_eps"], join(path, "adam_eps"));
  if (j.contains("epochs")) t.epochs = get_unsigned(j["epochs"], join(path, "epochs"));
  if (j.contains("batch_size")) t.batch_size = get_unsigned(j["batch_size"], join(path, "batch_size"));
  if (j.contains("freeze")) {
    const Json& f = j["freeze"];
    if (!f.is_array()) throw ConfigError(join(path, "freeze") + ": expected an array of booleans");
    for (std::size_t i = 0; i < f.size(); ++i) {
      t.freeze_mask.push_back(get_bool(f[i], join(path, "freeze[" + std::to_string(i) + "]")));
    }
  }
  if (j.contains("lr_decay")) {
    const Json& d = j["lr_decay"];
    const std::string dp = join(path, "lr_decay");
    check_keys(d, {"start_epoch", "factor"}, dp);
    LrDecay decay;
    if (d.contains("start_epoch")) decay.start_epoch = get_unsigned(d["start_epoch"], join(dp, "start_epoch"));
    if (d.contains("factor")) decay.factor = get_number(d["factor"], join(dp, "factor"));
    t.lr_decay = decay;
  }
  if (j.contains("min_lr")) t.min_lr = get_number(j["min_lr"], join(path, "min_lr"));
  if (j.contains("stop_on_mce_zero")) t.stop_on_mce_zero = get_bool(j["stop_on_mce_zero"], join(path, "stop_on_mce_zero"));
  if (j.contains("resample_noise")) t.resample_noise = get_bool(j["resample_noise"], join(path, "resample_noise"));
  if (t.learning_rate < 0.0) throw ConfigError(join(path, "learning_rate") + ": must be >= 0");
  if (t.epochs == 0) throw ConfigError(join(path, "epochs") + ": must be >= 1");
  return t;
}

inline ProbeConfig parse_probe(const Json& j, const std::string& path) {
  check_keys(j, {"learning_rate", "decay_start", "decay_factor", "min_lr", "u_tol", "u_floor", "mse_tol",
                 "g_tol", "compute_hessian"},
             path);
  ProbeConfig p;
  if (j.contains("learning_rate")) p.learning_rate = get_number(j["learning_rate"], join(path, "learning_rate"));
  if (j.contains("decay_start")) p.decay_start = get_unsigned(j["decay_start"], join(path, "decay_start"));
  if (j.contains("decay_factor")) p.decay_factor = get_number(j["decay_factor"], join(path, "decay_factor"));
  if (j.contains("min_lr")) p.min_lr = get_number(j["min_lr"], join(path, "min_lr"));
  if (j.contains("u_tol")) p.thresholds.u_tol = get_number(j["u_tol"], join(path, "u_tol"));
  if (j.contains("u_floor")) p.thresholds.u_floor = get_number(j["u_floor"], join(path, "u_floor"));
  if (j.contains("mse_tol")) p.thresholds.mse_tol = get_number(j["mse_tol"], join(path, "mse_tol"));
  if (j.contains("g_tol")) p.thresholds.g_tol = get_number(j["g_tol"], join(path, "g_tol"));
  if (j.contains("compute_hessian")) {
    p.thresholds.compute_hessian = get_bool(j["compute_hessian"], join(path, "compute_hessian"));
  }
  try {
    (void)p.total_epochs();
  } catch (const PreconditionError& e) {
    throw ConfigError(path + ": " + e.what());
  }
  return p;
}

inline SweepSpec parse_sweep(const Json& j, const std::string& path) {
  check_keys(j, {"widths", "samples", "hidden_layers", "overrides"}, path);
  SweepSpec s;
  if (!j.contains("widths") || !j.contains("samples")) {
    throw ConfigError(path + ": 'widths' and 'samples' are required");
  }
  s.widths = get_sizes(j["widths"], join(path, "widths"));
  s.samples = get_sizes(j["samples"], join(path, "samples"));
  if (s.widths.empty() || s.samples.empty()) throw ConfigError(path + ": empty grid");
  for (std::size_t v : s.widths) {
    if (v == 0) throw ConfigError(join(path, "widths") + ": widths must be >= 1");
  }
  for (std::size_t v : s.samples) {
    if (v == 0) throw ConfigError(join(path, "samples") + ": sample counts must be >= 1");
  }
  if (j.contains("hidden_layers")) s.hidden_layers = get_unsigned(j["hidden_layers"], join(path, "hidden_layers"));
  if (s.hidden_layers == 0) throw ConfigError(join(path, "hidden_layers") + ": must be >= 1");
  if (j.contains("overrides")) {
    const Json& o = j["overrides"];
    if (!o.is_array()) throw ConfigError(join(path, "overrides") + ": expected an array");
    for (std::size_t i = 0; i < o.size(); ++i) {
      const std::string op = join(path, "overrides[" + std::to_string(i) + "]");
      check_keys(o[i], {"width", "samples", "learning_rate", "epochs", "batch_size"}, op);
      if (!o[i].contains("width") || !o[i].contains("samples")) {
        throw ConfigError(op + ": 'width' and 'samples' select the cell and are required");
      }
      CellOverride c;
      c.width = get_unsigned(o[i]["width"], join(op, "width"));
      c.samples = get_unsigned(o[i]["samples"], join(op, "samples"));
      if (o[i].contains("learning_rate")) c.learning_rate = get_number(o[i]["learning_rate"], join(op, "learning_rate"));
      if (o[i].contains("epochs")) c.epochs = get_unsigned(o[i]["epochs"], join(op, "epochs"));
      if (o[i].contains("batch_size")) c.batch_size = get_unsigned(o[i]["batch_size"], join(op, "batch_size"));
      s.overrides.push_back(c);
    }
  }
  return s;
}

}  // namespace detail

inline ExperimentConfig parse_config(const Json& j) {
  detail::check_keys(j, {"seed", "repetitions", "threads", "network", "data", "init", "train", "probe",
                         "sweep", "hessian", "data_dir"},
                     "config");
  ExperimentConfig c;
  if (j.contains("seed")) c.seed = detail::get_unsigned(j["seed"], "seed");
  if (j.contains("repetitions")) c.repetitions = detail::get_unsigned(j["repetitions"], "repetitions");
  if (c.repetitions == 0) throw ConfigError("repetitions: must be >= 1");
  if (j.contains("threads")) c.threads = detail::get_unsigned(j["threads"], "threads");
  if (j.contains("network")) c.network = detail::parse_network(j["network"], "network");
  if (j.contains("data")) c.data = detail::parse_data(j["data"], "data");
  if (j.contains("init")) c.init = detail::parse_init(j["init"], "init");
  if (j.contains("train")) c.train = detail::parse_train(j["train"], "train");
  if (j.contains("probe")) c.probe = detail::parse_probe(j["probe"], "probe");
  if (j.contains("sweep")) c.sweep = detail::parse_sweep(j["sweep"], "sweep");
  if (j.contains("hessian")) {
    const Json& h = j["hessian"];
    detail::check_keys(h, {"compare_fd", "fd_step", "max_omega"}, "hessian");
    if (h.contains("compare_fd")) c.hessian.compare_fd = detail::get_bool(h["compare_fd"], "hessian.compare_fd");
    if (h.contains("fd_step")) c.hessian.fd_step = detail::get_number(h["fd_step"], "hessian.fd_step");
    if (h.contains("max_omega")) c.hessian.max_omega = detail::get_unsigned(h["max_omega"], "hessian.max_omega");
  }
  if (j.contains("data_dir")) c.data_dir = detail::get_string(j["data_dir"], "data_dir");
  return c;
}

inline ExperimentConfig load_config(const std::filesystem::path& path) {
  std::ifstream in(path);
  if (!in) throw ConfigError("cannot open config file " + path.string());
  Json j;
  try {
    j = Json::parse(in);
  } catch (const Json::parse_error& e) {
    throw ConfigError(path.string() + ": " + e.what());
  }
  return parse_config(j);
}

// ---------------------------------------------------------------------------
// Seeds. Row (cell c, repetition r) of a run with master seed m uses
// derive_seed(derive_seed(m, c), r); single-run commands are cell 0, rep 0.
// Every random object of the row draws from stream_seed(row_seed, Stream::*).

inline std::uint64_t row_seed(std::uint64_t master, std::size_t cell, std::size_t rep) {
  return derive_seed(derive_seed(master, cell), rep);
}

// ---------------------------------------------------------------------------
// Assembly.

/// Flag beats config beats the MNN_DATA_DIR environment variable.
inline std::filesystem::path resolve_data_dir(const std::string& flag, const std::string& config) {
  if (!flag.empty()) return flag;
  if (!config.empty()) return config;
  if (const char* env = std::getenv("MNN_DATA_DIR")) return env;
  return ".";
}

/// Relative file names resolve against data_dir.
inline Dataset load_mnist_files(const DataSpec& spec, const std::filesystem::path& data_dir) {
  const auto resolve = [&](const std::string& f) {
    std::filesystem::path p(f);
    return p.is_absolute() ? p : data_dir / p;
  };
  const auto images = resolve(spec.images);
  const auto labels = resolve(spec.labels);
  for (const auto& p : {images, labels}) {
    if (!std::filesystem::exists(p)) throw ConfigError("MNIST file not found: " + p.string());
  }
  return load_mnist(images, labels);
}

inline Dataset build_dataset(const DataSpec& spec, std::size_t d0, const std::filesystem::path& data_dir,
                             std::uint64_t seed) {
  if (spec.samples == 0) throw ConfigError("data.samples: must be >= 1");
  if (spec.source == DataSource::synthetic) return synthetic_dataset(d0, spec.samples, stream_seed(seed, Stream::data));
  Dataset full = load_mnist_files(spec, data_dir);
  if (full.input_dim() != d0) {
    throw ConfigError("network.widths[0] = " + std::to_string(d0) + " but MNIST images have " +
                      std::to_string(full.input_dim()) + " pixels");
  }
  if (spec.samples > full.samples()) {
    throw ConfigError("data.samples = " + std::to_string(spec.samples) + " exceeds the " +
                      std::to_string(full.samples()) + " available MNIST images");
  }
  return subset(full, spec.samples, stream_seed(seed, Stream::subset));
}

inline Weights build_init(const InitSpec& spec, const MnnConfig& config, std::uint64_t seed) {
  Weights w = spec.scheme == InitScheme::zeros ? Weights::zeros(config)
                                               : init_weights(config, stream_seed(seed, Stream::init));
  if (spec.perturb_std > 0.0) w = perturb_weights(w, spec.perturb_std, stream_seed(seed, Stream::perturb));
  return w;
}

inline NoiseTensors build_noise(const MnnConfig& config, std::size_t n, std::uint64_t seed) {
  if (config.noise.mode == NoiseMode::gaussian) return sample_noise(config, n, stream_seed(seed, Stream::noise));
  return NoiseTensors::ones(config, n);
}

inline void require_network(const MnnConfig& config) {
  if (config.widths.empty()) throw ConfigError("network.widths: required for this command");
  try {
    config.validate();
  } catch (const PreconditionError& e) {
    throw ConfigError(std::string("network: ") + e.what());
  }
}

// ---------------------------------------------------------------------------
// Writers. CSV files open with a '# schema: <name>/<version>' line, then a
// header row. Bump the version when columns change.

inline constexpr const char* kTrainLogSchema = "dlmlab.train_log/1";
inline constexpr const char* kProbeSchema = "dlmlab.probe_trajectory/1";
inline constexpr const char* kSweepSchema = "dlmlab.sweep/1";

namespace detail {

inline std::string fmt(double v) {
  std::ostringstream s;
  s.precision(17);
  s << v;
  return s.str();
}

}  // namespace detail

inline void write_train_log_csv(std::ostream& out, const TrainLog& log) {
  out << "# schema: " << kTrainLogSchema << "\n";
  out << "epoch,mse,mce,grad_norm,min_abs_u,lr\n";
  for (const auto& r : log.records) {
    out << r.epoch << ',' << detail::fmt(r.mse) << ',' << detail::fmt(r.mce) << ',' << detail::fmt(r.grad_norm)
        << ',' << detail::fmt(r.min_abs_u) << ',' << detail::fmt(r.lr) << "\n";
  }
}

inline void write_probe_csv(std::ostream& out, const TrainLog& log) {
  out << "# schema: " << kProbeSchema << "\n";
  out << "epoch,lr,mse,min_abs_u\n";
  for (const auto& r : log.records) {
    out << r.epoch << ',' << detail::fmt(r.lr) << ',' << detail::fmt(r.mse) << ',' << detail::fmt(r.min_abs_u)
        << "\n";
  }
}

/// JSON has no infinity; non-finite doubles become null.
inline Json json_number(double v) { return std::isfinite(v) ? Json(v) : Json(nullptr); }

inline Json to_json(const DlmCertificate& c) {
  Json j;
  j["verdict"] = to_string(c.verdict);
  j["samples"] = c.samples;
  j["final_mse"] = json_number(c.final_mse);
  j["final_mce"] = json_number(c.final_mce);
  j["error_norm"] = json_number(c.error_norm);
  j["grad_norm"] = json_number(c.grad_norm);
  j["min_abs_u"] = json_number(c.min_abs_u);
  j["kink_sensitivity"] = json_number(c.kink_sensitivity);
  j["rank_of_G_Lminus1"] = c.rank_last_hidden;
  j["sigma_min_G_Lminus1"] = json_number(c.sigma_min_last_hidden);
  j["residual_G_Lminus1_e"] = json_number(c.residual_last_hidden);
  j["hessian_min_eig"] = c.hessian_min_eig ? json_number(*c.hessian_min_eig) : Json(nullptr);
  j["hessian_max_eig"] = c.hessian_max_eig ? json_number(*c.hessian_max_eig) : Json(nullptr);
  j["finite"] = c.finite;
  j["thresholds"] = {{"g_tol", json_number(c.g_tol)},
                     {"mse_tol", json_number(c.mse_tol)},
                     {"u_tol", json_number(c.u_tol)},
                     {"u_floor", json_number(c.u_floor)}};
  return j;
}

inline Json to_json(const HessianAudit& a) {
  Json j;
  j["omega"] = a.omega;
  j["margin_ok"] = a.margin_ok;
  j["min_abs_u"] = json_number(a.min_abs_u);
  j["max_abs"] = json_number(a.max_abs);
  j["identically_zero"] = a.identically_zero;
  j["symmetry_defect"] = json_number(a.symmetry_defect);
  j["trace_h"] = json_number(a.trace_h);
  j["gram_trace"] = json_number(a.gram_trace);
  j["trace_residual"] = json_number(a.trace_residual);
  j["min_eig"] = json_number(a.min_eig);
  j["max_eig"] = json_number(a.max_eig);
  j["fd_rel_err"] = a.fd_rel_err ? json_number(*a.fd_rel_err) : Json(nullptr);
  return j;
}

inline Json to_json(const AeCheckSpec& spec, const AeCheckResult& r) {
  Json j;
  j["variant"] = to_string(spec.variant);
  j["widths"] = spec.widths;
  j["samples"] = spec.samples;
  j["trials"] = spec.trials;
  j["weight_redraws"] = spec.weight_redraws;
  j["rel_tol"] = spec.rel_tol;
  j["duplicate_columns"] = spec.duplicate_columns;
  j["passed"] = r.passed;
  j["cases"] = r.cases;
  j["full_rank_cases"] = r.full_rank_cases;
  j["worst_condition"] = json_number(r.worst_condition);
  Json ce = Json::array();
  for (const auto& c : r.counterexamples) {
    ce.push_back({{"trial", c.trial}, {"redraw", c.redraw}, {"trial_seed", c.trial_seed}, {"rank", c.rank}});
  }
  j["counterexamples"] = ce;
  return j;
}

// ---------------------------------------------------------------------------
// Construction oracle: G'_{L-1} of the explicit witness against [I]_{1..N}.

struct ConstructionReport {
  std::vector<std::size_t> widths;
  std::size_t samples = 0;
  std::size_t rank = 0;
  bool equals_identity = false;
  bool passed = false;
};

inline ConstructionReport construction_oracle(const std::vector<std::size_t>& widths, std::size_t n) {
  const Construction c = appendix_construction(widths, n);
  const ForwardTrace trace = forward(c.weights, c.x, c.noise, c.config);
  const auto deltas = compute_deltas(c.weights, trace);
  const std::size_t depth = c.config.depth();
  const Matrix g = g_matrix(depth - 1, trace, deltas);
  ConstructionReport r;
  r.widths = widths;
  r.samples = n;
  r.rank = numerical_rank(g, kDefaultRankTol);
  Matrix expected(g.rows(), n);
  for (std::size_t k = 0; k < n; ++k) expected(k, k) = 1.0;
  r.equals_identity = g == expected;
  r.passed = r.equals_identity && r.rank == n;
  return r;
}

inline Json to_json(const ConstructionReport& r) {
  return {{"widths", r.widths},          {"samples", r.samples}, {"rank", r.rank},
          {"expected", r.samples},       {"g_equals_identity", r.equals_identity},
          {"pass", r.passed}};
}

// ---------------------------------------------------------------------------
// Sweep over a (hidden width d, N) grid.

struct SweepRow {
  std::string dataset;
  std::size_t d = 0;
  std::size_t samples = 0;
  std::size_t cell = 0;
  std::size_t rep = 0;
  std::uint64_t seed = 0;
  double final_mse = 0.0;
  double final_mce = 0.0;
  std::size_t epochs_run = 0;
  std::string status;
  double wall_time = 0.0;
  bool ok = false;
};

struct SweepCell {
  std::size_t d = 0;
  std::size_t samples = 0;
  MnnConfig network;
  TrainConfig train;
};

/// Synthetic cells use d_0 = d; MNIST cells keep d_0 = 784 and vary only the
/// hidden width.
inline std::vector<SweepCell> sweep_cells(const ExperimentConfig& config) {
  if (!config.sweep) throw ConfigError("sweep: section required");
  if (!config.train) throw ConfigError("train: section required for sweeps");
  const SweepSpec& s = *config.sweep;
  for (const auto& o : s.overrides) {
    bool found = false;
    for (std::size_t d : s.widths)
      for (std::size_t n : s.samples) found = found || (o.width == d && o.samples == n);
    if (!found) {
      throw ConfigError("sweep.overrides: no cell with width " + std::to_string(o.width) + " and samples " +
                        std::to_string(o.samples));
    }
  }
  std::vector<SweepCell> cells;
  for (std::size_t d : s.widths) {
    for (std::size_t n : s.samples) {
      SweepCell c{d, n, config.network, *config.train};
      const std::size_t d0 = config.data.source == DataSource::mnist ? 784 : d;
      c.network.widths.assign(1, d0);
      for (std::size_t h = 0; h < s.hidden_layers; ++h) c.network.widths.push_back(d);
      c.network.widths.push_back(1);
      for (const auto& o : s.overrides) {
        if (o.width != d || o.samples != n) continue;
        if (o.learning_rate) c.train.learning_rate = *o.learning_rate;
        if (o.epochs) c.train.epochs = *o.epochs;
        if (o.batch_size) c.train.batch_size = *o.batch_size;
      }
      cells.push_back(std::move(c));
    }
  }
  return cells;
}

/// Rows are written into fixed slots, so the result does not depend on the
/// thread count. A row that throws is recorded with status "error: ...".
inline std::vector<SweepRow> run_sweep(const ExperimentConfig& config, const std::filesystem::path& data_dir) {
  const auto cells = sweep_cells(config);
  const std::size_t reps = config.repetitions;
  std::vector<SweepRow> rows(cells.size() * reps);
  std::optional<Dataset> mnist;
  if (config.data.source == DataSource::mnist) {
    mnist = load_mnist_files(config.data, data_dir);
  }
  parallel_for(rows.size(), config.threads, [&](std::size_t k) {
    const std::size_t ci = k / reps;
    const SweepCell& cell = cells[ci];
    SweepRow& row = rows[k];
    row.dataset = config.data.source == DataSource::mnist ? "mnist" : "synthetic";
    row.d = cell.d;
    row.samples = cell.samples;
    row.cell = ci;
    row.rep = k % reps;
    row.seed = row_seed(config.seed, ci, row.rep);
    const auto t0 = std::chrono::steady_clock::now();
    try {
      Dataset data = mnist ? subset(*mnist, cell.samples, stream_seed(row.seed, Stream::subset))
                           : synthetic_dataset(cell.d, cell.samples, stream_seed(row.seed, Stream::data));
      const Weights init = build_init(config.init, cell.network, row.seed);
      const NoiseTensors noise = build_noise(cell.network, cell.samples, row.seed);
      TrainConfig tc = cell.train;
      tc.seed = row.seed;
      const TrainResult r = train(tc, data, cell.network, init, noise);
      row.final_mse = r.log.last().mse;
      row.final_mce = r.log.last().mce;
      row.epochs_run = r.log.epochs_run();
      row.status = to_string(r.log.status);
      row.ok = r.log.status != TrainStatus::aborted_nonfinite;
    } catch (const std::exception& e) {
      row.status = std::string("error: ") + e.what();
      row.final_mse = row.final_mce = std::nan("");
      row.ok = false;
    }
    row.wall_time = std::chrono::duration<double>(std::chrono::steady_clock::now() - t0).count();
  });
  return rows;
}

namespace detail {

inline std::string csv_field(const std::string& s) {
  if (s.find_first_of(",\"\n") == std::string::npos) return s;
  std::string out = "\"";
  for (char ch : s) {
    if (ch == '"') out += '"';
    out += ch;
  }
  return out + "\"";
}

}  // namespace detail

inline void write_sweep_csv(std::ostream& out, const std::vector<SweepRow>& rows) {
  out << "# schema: " << kSweepSchema << "\n";
  out << "dataset,d,N,d2_over_N,cell,repetition,seed,final_mse,final_mce,epochs_run,status,wall_time_seconds\n";
  for (const auto& r : rows) {
    const double ratio = static_cast<double>(r.d * r.d) / static_cast<double>(r.samples);
    out << r.dataset << ',' << r.d << ',' << r.samples << ',' << detail::fmt(ratio) << ',' << r.cell << ','
        << r.rep << ',' << r.seed << ',' << detail::fmt(r.final_mse) << ',' << detail::fmt(r.final_mce) << ','
        << r.epochs_run << ',' << detail::csv_field(r.status) << ',' << detail::fmt(r.wall_time) << "\n";
  }
}

/// Mean and (population) standard deviation of MCE and MSE per cell, over the
/// rows that finished.
inline Json sweep_summary(const std::vector<SweepRow>& rows) {
  std::map<std::size_t, std::vector<const SweepRow*>> by_cell;
  for (const auto& r : rows) by_cell[r.cell].push_back(&r);
  Json cells = Json::array();
  std::size_t ok = 0;
  for (const auto& [cell, list] : by_cell) {
    double sm = 0, sm2 = 0, se = 0, se2 = 0;
    std::size_t n = 0, zero = 0;
    for (const SweepRow* r : list) {
      if (!r->ok) continue;
      ++n;
      sm += r->final_mce;
      sm2 += r->final_mce * r->final_mce;
      se += r->final_mse;
      se2 += r->final_mse * r->final_mse;
      zero += r->final_mce == 0.0;
    }
    ok += n;
    const double cnt = static_cast<double>(std::max<std::size_t>(n, 1));
    const double mean_mce = sm / cnt, mean_mse = se / cnt;
    Json c;
    c["cell"] = cell;
    c["dataset"] = list.front()->dataset;
    c["d"] = list.front()->d;
    c["N"] = list.front()->samples;
    c["d2_over_N"] = static_cast<double>(list.front()->d * list.front()->d) / static_cast<double>(list.front()->samples);
    c["rows"] = list.size();
    c["succeeded"] = n;
    c["mce_zero"] = zero;
    c["mean_mce"] = n ? json_number(mean_mce) : Json(nullptr);
    c["std_mce"] = n ? json_number(std::sqrt(std::max(0.0, sm2 / cnt - mean_mce * mean_mce))) : Json(nullptr);
    c["mean_mse"] = n ? json_number(mean_mse) : Json(nullptr);
    c["std_mse"] = n ? json_number(std::sqrt(std::max(0.0, se2 / cnt - mean_mse * mean_mse))) : Json(nullptr);
    cells.push_back(c);
  }
  Json j;
  j["rows"] = rows.size();
  j["succeeded"] = ok;
  j["cells"] = cells;
  return j;
}

/// The sweep counts as successful when at least 90% of its rows finished.
inline bool sweep_succeeded(const std::vector<SweepRow>& rows) {
  std::size_t ok = 0;
  for (const auto& r : rows) ok += r.ok;
  return 10 * ok >= 9 * rows.size();
}

}  // namespace dlmlab
