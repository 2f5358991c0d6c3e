#pragma once

// Training loops (full-batch GD, mini-batch Adam), learning-rate schedules,
// layer freezing, weight perturbation and the GD convergence probe.

#include <cmath>
#include <cstddef>
#include <cstdint>
#include <optional>
#include <span>
#include <string>
#include <utility>
#include <vector>

#include "dlmlab/data.hpp"
#include "dlmlab/diagnostics.hpp"
#include "dlmlab/errors.hpp"
#include "dlmlab/gradients.hpp"
#include "dlmlab/model.hpp"
#include "dlmlab/rng.hpp"

namespace dlmlab {

enum class Optimizer { gd, adam };

inline const char* to_string(Optimizer o) { return o == Optimizer::gd ? "gd" : "adam"; }

struct LrDecay {
  std::size_t start_epoch = 5000;
  double factor = 0.999;
};

struct TrainConfig {
  Optimizer optimizer = Optimizer::adam;
  double learning_rate = 1e-3;
  double beta1 = 0.9;
  double beta2 = 0.99;
  double adam_eps = 1e-8;
  std::size_t epochs = 4000;
  std::size_t batch_size = 0;  // 0 = full batch
  std::uint64_t seed = 0;      // shuffling (and noise re-sampling, if enabled)
  std::vector<bool> freeze_mask;  // one flag per weight layer; empty = train all
  std::optional<LrDecay> lr_decay;
  std::optional<double> min_lr;  // stop once the schedule drops below this
  bool stop_on_mce_zero = false;
  /// Draw a fresh noise realization every epoch (off in every experiment
  /// shipped here; the analysis conditions on one realization).
  bool resample_noise = false;

  void validate(std::size_t depth) const {
    if (!(learning_rate >= 0.0) || !std::isfinite(learning_rate)) {
      throw PreconditionError("TrainConfig: learning_rate must be finite and >= 0");
    }
    if (!(beta1 >= 0.0 && beta1 < 1.0) || !(beta2 >= 0.0 && beta2 < 1.0)) {
      throw PreconditionError("TrainConfig: betas must lie in [0, 1)");
    }
    if (!(adam_eps > 0.0)) throw PreconditionError("TrainConfig: adam_eps must be positive");
    if (epochs == 0) throw PreconditionError("TrainConfig: epochs must be >= 1");
    if (!freeze_mask.empty() && freeze_mask.size() != depth) {
      throw PreconditionError("TrainConfig: freeze_mask has " + std::to_string(freeze_mask.size()) +
                              " entries, network has " + std::to_string(depth) + " layers");
    }
    if (lr_decay && !(lr_decay->factor > 0.0 && lr_decay->factor <= 1.0)) {
      throw PreconditionError("TrainConfig: lr decay factor must lie in (0, 1]");
    }
  }
};

struct EpochRecord {
  std::size_t epoch = 0;  // 0 is the initial state
  double mse = 0.0;
  double mce = 0.0;
  double grad_norm = 0.0;
  double min_abs_u = 0.0;
  double lr = 0.0;  // rate used during this epoch (0 for epoch 0)
};

enum class TrainStatus { completed, stopped_mce_zero, stopped_min_lr, aborted_nonfinite };

inline const char* to_string(TrainStatus s) {
  switch (s) {
    case TrainStatus::completed: return "completed";
    case TrainStatus::stopped_mce_zero: return "stopped_mce_zero";
    case TrainStatus::stopped_min_lr: return "stopped_min_lr";
    case TrainStatus::aborted_nonfinite: return "aborted_nonfinite";
  }
  return "unknown";
}

struct TrainLog {
  std::vector<EpochRecord> records;
  TrainStatus status = TrainStatus::completed;
  std::string diagnostic;

  std::size_t epochs_run() const noexcept { return records.empty() ? 0 : records.back().epoch; }
  const EpochRecord& initial() const { return records.front(); }
  const EpochRecord& last() const { return records.back(); }
};

/// w <- w - lr * grad over the flattened layout.
inline Weights gd_step(const Weights& weights, std::span<const double> grad, double lr) {
  if (grad.size() != weights.parameter_count()) {
    throw DimensionError("gd_step: gradient has " + std::to_string(grad.size()) +
                         " entries, weights have " + std::to_string(weights.parameter_count()));
  }
  Weights out = weights;
  std::size_t k = 0;
  for (std::size_t l = 1; l <= out.depth(); ++l)
    for (double& w : out.layer(l).data()) w -= lr * grad[k++];
  return out;
}

struct AdamParams {
  double lr = 1e-3;
  double beta1 = 0.9;
  double beta2 = 0.99;
  double eps = 1e-8;
};

struct AdamState {
  std::vector<double> m;
  std::vector<double> v;
  std::size_t t = 0;

  explicit AdamState(std::size_t n = 0) : m(n, 0.0), v(n, 0.0) {}
};

/// One bias-corrected Adam update; advances state.t.
inline Weights adam_step(AdamState& state, const Weights& weights, std::span<const double> grad,
                         const AdamParams& p) {
  if (grad.size() != weights.parameter_count() || state.m.size() != grad.size()) {
    throw DimensionError("adam_step: gradient, state and weights disagree in size");
  }
  ++state.t;
  const double c1 = 1.0 - std::pow(p.beta1, static_cast<double>(state.t));
  const double c2 = 1.0 - std::pow(p.beta2, static_cast<double>(state.t));
  Weights out = weights;
  std::size_t k = 0;
  for (std::size_t l = 1; l <= out.depth(); ++l) {
    for (double& w : out.layer(l).data()) {
      const double g = grad[k];
      state.m[k] = p.beta1 * state.m[k] + (1.0 - p.beta1) * g;
      state.v[k] = p.beta2 * state.v[k] + (1.0 - p.beta2) * g * g;
      const double m_hat = state.m[k] / c1;
      const double v_hat = state.v[k] / c2;
      w -= p.lr * m_hat / (std::sqrt(v_hat) + p.eps);
      ++k;
    }
  }
  return out;
}

/// Base rate before decay.start_epoch, base * factor^(epoch - start) from then on.
inline double lr_schedule(std::size_t epoch, const TrainConfig& config) {
  if (!config.lr_decay) return config.learning_rate;
  const LrDecay& d = *config.lr_decay;
  if (!(d.factor > 0.0 && d.factor <= 1.0)) {
    throw PreconditionError("lr_schedule: factor must lie in (0, 1], got " +
                            std::to_string(d.factor));
  }
  if (epoch < d.start_epoch) return config.learning_rate;
  return config.learning_rate * std::pow(d.factor, static_cast<double>(epoch - d.start_epoch));
}

struct TrainResult {
  Weights weights;
  TrainLog log;
};

inline TrainResult train(const TrainConfig& config, const Dataset& data,
                         const MnnConfig& mnn_config, const Weights& init,
                         const NoiseTensors& noise) {
  mnn_config.validate();
  data.validate();
  config.validate(mnn_config.depth());
  init.check_shapes(mnn_config);
  noise.check_shapes(mnn_config, data.samples());

  const std::size_t n = data.samples();
  const std::size_t omega = mnn_config.parameter_count();
  std::vector<bool> trainable(omega, true);
  if (!config.freeze_mask.empty()) {
    for (std::size_t l = 1; l <= mnn_config.depth(); ++l) {
      if (!config.freeze_mask[l - 1]) continue;
      const std::size_t off = init.offset(l);
      for (std::size_t k = 0; k < init.layer(l).size(); ++k) trainable[off + k] = false;
    }
  }
  auto mask = [&](std::vector<double> g) {
    for (std::size_t k = 0; k < g.size(); ++k)
      if (!trainable[k]) g[k] = 0.0;
    return g;
  };

  Rng shuffle_rng(stream_seed(config.seed, Stream::shuffle));
  Rng noise_rng(stream_seed(config.seed, Stream::noise));
  NoiseTensors current_noise = noise;
  AdamState adam(omega);
  const AdamParams adam_params{config.learning_rate, config.beta1, config.beta2, config.adam_eps};
  const bool full_batch = config.batch_size == 0 || config.batch_size >= n;

  TrainResult result{init, {}};
  auto record = [&](std::size_t epoch, double lr, const Evaluation& ev) {
    result.log.records.push_back({epoch, ev.mse, mce(ev.trace.prediction().data(), data.y.data()),
                                  norm2(ev.flat_gradient),
                                  min_abs_hidden_pre_activation(ev.trace), lr});
  };

  std::optional<Evaluation> full;
  try {
    full = evaluate(result.weights, data.x, data.y, current_noise, mnn_config);
  } catch (const NonFiniteError& e) {
    result.log.status = TrainStatus::aborted_nonfinite;
    result.log.diagnostic = std::string("initial evaluation: ") + e.what();
    return result;
  }
  record(0, 0.0, *full);
  if (config.stop_on_mce_zero && result.log.last().mce == 0.0) {
    result.log.status = TrainStatus::stopped_mce_zero;
    return result;
  }

  for (std::size_t epoch = 1; epoch <= config.epochs; ++epoch) {
    const double lr = lr_schedule(epoch, config);
    if (config.min_lr && lr < *config.min_lr) {
      result.log.status = TrainStatus::stopped_min_lr;
      break;
    }
    try {
      auto apply = [&](const std::vector<double>& grad) {
        const auto g = mask(grad);
        if (config.optimizer == Optimizer::gd) {
          result.weights = gd_step(result.weights, g, lr);
        } else {
          AdamParams p = adam_params;
          p.lr = lr;
          result.weights = adam_step(adam, result.weights, g, p);
        }
      };
      if (config.resample_noise) {
        current_noise = sample_noise(mnn_config, n, noise_rng.next_u64());
        full = evaluate(result.weights, data.x, data.y, current_noise, mnn_config);
      }
      if (full_batch) {
        apply(full->flat_gradient);
      } else {
        std::vector<std::size_t> order = shuffle_rng.permutation(n);
        for (std::size_t start = 0; start < n; start += config.batch_size) {
          const std::size_t stop = std::min(n, start + config.batch_size);
          const std::span<const std::size_t> idx(order.data() + start, stop - start);
          const Evaluation ev = evaluate(result.weights, select_columns(data.x, idx),
                                         select_columns(data.y, idx),
                                         current_noise.select_columns(idx), mnn_config);
          apply(ev.flat_gradient);
        }
      }
      full = evaluate(result.weights, data.x, data.y, current_noise, mnn_config);
    } catch (const NonFiniteError& e) {
      result.log.status = TrainStatus::aborted_nonfinite;
      result.log.diagnostic = "epoch " + std::to_string(epoch) + ": " + e.what();
      break;
    }
    record(epoch, lr, *full);
    if (config.stop_on_mce_zero && result.log.last().mce == 0.0) {
      result.log.status = TrainStatus::stopped_mce_zero;
      break;
    }
  }
  return result;
}

/// w + N(0, stddev^2) i.i.d. on every entry.
inline Weights perturb_weights(const Weights& weights, double stddev, std::uint64_t seed) {
  if (!(stddev > 0.0)) throw PreconditionError("perturb_weights: stddev must be positive");
  Rng rng(seed);
  Weights out = weights;
  for (std::size_t l = 1; l <= out.depth(); ++l)
    for (double& w : out.layer(l).data()) w += rng.normal(0.0, stddev);
  return out;
}

// ---------------------------------------------------------------------------
// Convergence probe: full-batch GD at a constant rate, then geometric decay
// until the rate falls below min_lr, then certification of the end point.

struct ProbeConfig {
  double learning_rate = 0.2;
  std::size_t decay_start = 5000;
  double decay_factor = 0.999;
  double min_lr = 1e-9;
  DlmThresholds thresholds = probe_thresholds();

  static DlmThresholds probe_thresholds() {
    DlmThresholds t;
    t.mse_tol = 1e-20;
    return t;
  }

  /// Epoch budget implied by the schedule.
  std::size_t total_epochs() const {
    if (!(learning_rate > 0.0) || !(min_lr > 0.0)) {
      throw PreconditionError("ProbeConfig: learning_rate and min_lr must be positive");
    }
    if (!(decay_factor > 0.0 && decay_factor < 1.0)) {
      throw PreconditionError("ProbeConfig: decay_factor must lie in (0, 1)");
    }
    const double steps = std::ceil(std::log(min_lr / learning_rate) / std::log(decay_factor));
    return decay_start + static_cast<std::size_t>(std::max(0.0, steps)) + 1;
  }
};

struct ProbeResult {
  DlmCertificate certificate;
  TrainLog log;
  Weights weights;
};

inline ProbeResult dlm_probe(const ProbeConfig& probe, const Dataset& data,
                             const MnnConfig& mnn_config, const Weights& init,
                             const NoiseTensors& noise) {
  TrainConfig tc;
  tc.optimizer = Optimizer::gd;
  tc.learning_rate = probe.learning_rate;
  tc.epochs = probe.total_epochs();
  tc.batch_size = 0;
  tc.lr_decay = LrDecay{probe.decay_start, probe.decay_factor};
  tc.min_lr = probe.min_lr;
  TrainResult run = train(tc, data, mnn_config, init, noise);

  DlmThresholds thresholds = probe.thresholds;
  thresholds.reference_mse = run.log.initial().mse;
  DlmCertificate cert;
  if (run.log.status == TrainStatus::aborted_nonfinite) {
    cert.samples = data.samples();
    cert.finite = false;
    cert.verdict = Verdict::not_converged;
  } else {
    cert = certify_dlm(run.weights, data, noise, mnn_config, thresholds);
  }
  return {std::move(cert), std::move(run.log), std::move(run.weights)};
}

}  // namespace dlmlab
