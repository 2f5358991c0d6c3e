#pragma once

// Rank reports, differentiable-local-minimum certificates, Hessian audits and
// the randomized almost-everywhere rank checks.

#include <algorithm>
#include <cmath>
#include <cstddef>
#include <cstdint>
#include <limits>
#include <optional>
#include <string>
#include <utility>
#include <vector>

#include "dlmlab/data.hpp"
#include "dlmlab/errors.hpp"
#include "dlmlab/gradients.hpp"
#include "dlmlab/linalg.hpp"
#include "dlmlab/model.hpp"
#include "dlmlab/parallel.hpp"
#include "dlmlab/rng.hpp"

namespace dlmlab {

// ---------------------------------------------------------------------------
// Rank report

struct LayerRank {
  std::size_t layer = 0;
  std::size_t rows = 0;
  std::size_t rank = 0;
  std::size_t nullspace_dim = 0;  // N - rank
  double sigma_max = 0.0;
  double sigma_min = 0.0;         // smallest of the min(rows, N) singular values
  double condition = 0.0;         // sigma_max / sigma_min, +inf when sigma_min == 0
};

struct RankReport {
  std::size_t samples = 0;
  double rel_tol = kDefaultRankTol;
  std::vector<LayerRank> layers;  // G_1..G_L
  std::size_t stacked_rank = 0;
  /// rank(G_{L-1}) == N, which forces e = 0 wherever G_{L-1} e = 0.
  bool last_hidden_full_rank = false;
};

namespace detail {

inline LayerRank layer_rank(std::size_t l, const Matrix& g, double rel_tol) {
  const auto sv = singular_values(g);
  LayerRank r;
  r.layer = l;
  r.rows = g.rows();
  r.rank = rank_from_singular_values(sv, rel_tol);
  r.nullspace_dim = g.cols() - r.rank;
  r.sigma_max = sv.front();
  r.sigma_min = sv.back();
  r.condition = r.sigma_min > 0.0 ? r.sigma_max / r.sigma_min
                                  : std::numeric_limits<double>::infinity();
  return r;
}

}  // namespace detail

inline RankReport rank_report(const Weights& weights, const Matrix& x, const NoiseTensors& noise,
                              const MnnConfig& config, double rel_tol = kDefaultRankTol) {
  const ForwardTrace trace = forward(weights, x, noise, config);
  const auto deltas = compute_deltas(weights, trace);
  RankReport report;
  report.samples = x.cols();
  report.rel_tol = rel_tol;
  std::vector<Matrix> blocks;
  for (std::size_t l = 1; l <= config.depth(); ++l) {
    blocks.push_back(g_matrix(l, trace, deltas));
    report.layers.push_back(detail::layer_rank(l, blocks.back(), rel_tol));
  }
  report.stacked_rank = numerical_rank(vstack(blocks), rel_tol);
  report.last_hidden_full_rank = report.layers[config.depth() - 2].rank == x.cols();
  return report;
}

// ---------------------------------------------------------------------------
// DLM certificate

enum class Verdict {
  dlm_zero_loss,
  dlm_nonzero_loss,
  nondifferentiable_suspect,
  not_converged,
  inconsistent_with_theorem,
};

inline const char* to_string(Verdict v) {
  switch (v) {
    case Verdict::dlm_zero_loss: return "dlm_zero_loss";
    case Verdict::dlm_nonzero_loss: return "dlm_nonzero_loss";
    case Verdict::nondifferentiable_suspect: return "nondifferentiable_suspect";
    case Verdict::not_converged: return "not_converged";
    case Verdict::inconsistent_with_theorem: return "INCONSISTENT_WITH_THEOREM";
  }
  return "unknown";
}

struct DlmThresholds {
  /// Absolute gradient-norm tolerance; default 1e-7 (1 + ||e|| / sqrt(N)).
  std::optional<double> g_tol;
  /// Absolute MSE tolerance; default 1e-12 max(1, reference_mse).
  std::optional<double> mse_tol;
  double reference_mse = 1.0;
  double u_tol = 1e-6;
  double u_floor = 1e-12;
  double rank_tol = kDefaultRankTol;
  bool compute_hessian = false;
};

struct DlmCertificate {
  std::size_t samples = 0;
  double final_mse = 0.0;
  double final_mce = 0.0;
  double error_norm = 0.0;
  double grad_norm = 0.0;
  double min_abs_u = 0.0;
  /// Largest first-order jump in the directional derivative caused by any
  /// unit with |u| <= u_tol. Zero means the small inputs cannot create a kink
  /// to first order (e.g. every unit at w = 0 with L >= 3).
  double kink_sensitivity = 0.0;
  std::size_t rank_last_hidden = 0;  // rank(G_{L-1})
  double sigma_min_last_hidden = 0.0;
  double residual_last_hidden = 0.0;  // ||G_{L-1} e||
  std::optional<double> hessian_min_eig;
  std::optional<double> hessian_max_eig;
  bool finite = true;
  // Resolved thresholds.
  double g_tol = 0.0;
  double mse_tol = 0.0;
  double u_tol = 0.0;
  double u_floor = 0.0;
  Verdict verdict = Verdict::not_converged;
};

/// Verdict rules, evaluated in order:
///  1. non-finite state                                   -> not_converged
///  2. min|u| < u_floor with kink_sensitivity > 0          -> nondifferentiable_suspect
///  3. grad_norm >= g_tol                                  -> not_converged
///  4. min|u| <= u_tol with kink_sensitivity > 0           -> not_converged (margin inconclusive)
///  5. mse < mse_tol                                       -> dlm_zero_loss
///  6. rank(G_{L-1}) == N:
///       ||e|| <= ||G_{L-1} e|| / sigma_min (1 + 1e-6)     -> not_converged (ill-conditioned stall)
///       otherwise                                         -> inconsistent_with_theorem
///  7. otherwise                                           -> dlm_nonzero_loss
inline Verdict derive_verdict(const DlmCertificate& c) {
  if (!c.finite) return Verdict::not_converged;
  const bool kinky = c.kink_sensitivity > 0.0;
  if (c.min_abs_u < c.u_floor && kinky) return Verdict::nondifferentiable_suspect;
  if (!(c.grad_norm < c.g_tol)) return Verdict::not_converged;
  if (c.min_abs_u <= c.u_tol && kinky) return Verdict::not_converged;
  if (c.final_mse < c.mse_tol) return Verdict::dlm_zero_loss;
  if (c.rank_last_hidden == c.samples) {
    const double bound = c.sigma_min_last_hidden > 0.0
                             ? c.residual_last_hidden / c.sigma_min_last_hidden * (1.0 + 1e-6)
                             : std::numeric_limits<double>::infinity();
    return c.error_norm <= bound ? Verdict::not_converged : Verdict::inconsistent_with_theorem;
  }
  return Verdict::dlm_nonzero_loss;
}

namespace detail {

/// max over hidden units with |u| <= u_tol of
///   |eps (1 - s)| * |(W_{l+1}^T Delta_{l+1})_i| * ||d u_{i,l} / d w||.
inline double kink_sensitivity(const Weights& weights, const ForwardTrace& trace,
                               const std::vector<Matrix>& deltas, const NoiseTensors& noise,
                               const MnnConfig& config, double u_tol) {
  double worst = 0.0;
  const std::size_t depth = config.depth();
  for (std::size_t l = 1; l < depth; ++l) {
    const Matrix& u = trace.pre_activation(l);
    std::optional<Matrix> upstream;
    for (std::size_t i = 0; i < u.rows(); ++i) {
      for (std::size_t n = 0; n < u.cols(); ++n) {
        if (std::abs(u(i, n)) > u_tol) continue;
        if (!upstream) upstream = matmul_tn(weights.layer(l + 1), deltas[l]);
        const double jump = std::abs(noise.layer(l)(i, n) * (1.0 - config.leaky_slope)) *
                            std::abs((*upstream)(i, n));
        if (jump == 0.0) continue;
        // ||grad_w u_{i,l}||^2 = sum_k ||r_k||^2 ||v_{k-1}||^2, r_l = e_i,
        // r_k = diag(a_k) W_{k+1}^T r_{k+1}.
        std::vector<double> r(u.rows(), 0.0);
        r[i] = 1.0;
        auto col_norm_sq = [&](std::size_t k) {
          const Matrix& v = trace.output(k);
          double s = 0.0;
          for (std::size_t j = 0; j < v.rows(); ++j) s += v(j, n) * v(j, n);
          return s;
        };
        double grad_sq = col_norm_sq(l - 1);
        for (std::size_t k = l - 1; k >= 1; --k) {
          const Matrix& w = weights.layer(k + 1);
          std::vector<double> next(w.cols(), 0.0);
          for (std::size_t a = 0; a < w.rows(); ++a) {
            if (r[a] == 0.0) continue;
            for (std::size_t b = 0; b < w.cols(); ++b) next[b] += r[a] * w(a, b);
          }
          double rn = 0.0;
          for (std::size_t b = 0; b < next.size(); ++b) {
            next[b] *= trace.slopes(k)(b, n);
            rn += next[b] * next[b];
          }
          grad_sq += rn * col_norm_sq(k - 1);
          r = std::move(next);
        }
        worst = std::max(worst, jump * std::sqrt(grad_sq));
      }
    }
  }
  return worst;
}

}  // namespace detail

inline DlmCertificate certify_dlm(const Weights& weights, const Dataset& data,
                                  const NoiseTensors& noise, const MnnConfig& config,
                                  const DlmThresholds& thresholds = {}) {
  DlmCertificate c;
  c.samples = data.samples();
  c.u_tol = thresholds.u_tol;
  c.u_floor = thresholds.u_floor;
  try {
    const Evaluation ev = evaluate(weights, data.x, data.y, noise, config);
    c.final_mse = ev.mse;
    c.final_mce = mce(ev.trace.prediction().data(), data.y.data());
    c.error_norm = norm2(ev.error);
    c.grad_norm = norm2(ev.flat_gradient);
    c.min_abs_u = min_abs_hidden_pre_activation(ev.trace);
    c.kink_sensitivity =
        detail::kink_sensitivity(weights, ev.trace, ev.deltas, noise, config, thresholds.u_tol);

    const std::size_t last = config.depth() - 1;
    const Matrix g_last = g_matrix(last, ev.trace, ev.deltas);
    const auto sv = singular_values(g_last);
    c.rank_last_hidden = rank_from_singular_values(sv, thresholds.rank_tol);
    c.sigma_min_last_hidden = g_last.rows() >= g_last.cols() ? sv.back() : 0.0;
    std::vector<double> ge(g_last.rows(), 0.0);
    for (std::size_t r = 0; r < g_last.rows(); ++r) ge[r] = dot(g_last.row(r), ev.error);
    c.residual_last_hidden = norm2(ge);

    if (thresholds.compute_hessian) {
      const auto hb = hessian(weights, data.x, data.y, noise, config);
      const auto eig = sym_eigenvalues(hb.hessian, 1e-8);
      c.hessian_min_eig = eig.front();
      c.hessian_max_eig = eig.back();
    }
  } catch (const NonFiniteError&) {
    c.finite = false;
  }
  const double n = static_cast<double>(std::max<std::size_t>(c.samples, 1));
  c.g_tol = thresholds.g_tol.value_or(1e-7 * (1.0 + c.error_norm / std::sqrt(n)));
  c.mse_tol = thresholds.mse_tol.value_or(1e-12 * std::max(1.0, thresholds.reference_mse));
  c.finite = c.finite && std::isfinite(c.final_mse) && std::isfinite(c.grad_norm);
  c.verdict = derive_verdict(c);
  return c;
}

// ---------------------------------------------------------------------------
// Hessian audit

struct HessianAudit {
  std::size_t omega = 0;
  bool margin_ok = false;
  double min_abs_u = 0.0;
  double max_abs = 0.0;
  bool identically_zero = false;
  double symmetry_defect = 0.0;     // max |H - H^T|
  double trace_h = 0.0;
  double trace_first_term = 0.0;    // exactly zero when the Lambda diagonal blocks vanish
  double gram_trace = 0.0;          // ||G||_F^2 / N
  double trace_residual = 0.0;      // |trace(H) - ||G||_F^2 / N|
  double min_eig = 0.0;
  double max_eig = 0.0;
  std::optional<double> fd_rel_err;  // ||H - H_fd||_F / ||H_fd||_F
};

struct HessianAuditOptions {
  bool compare_fd = true;
  double fd_step = kDefaultFdStep;
  std::size_t max_omega = 2000;
};

inline HessianAudit hessian_audit(const Weights& weights, const Dataset& data,
                                  const NoiseTensors& noise, const MnnConfig& config,
                                  const HessianAuditOptions& options = {}) {
  const std::size_t omega = config.parameter_count();
  if (omega > options.max_omega) {
    throw PreconditionError("hessian_audit: omega = " + std::to_string(omega) +
                            " exceeds the dense Hessian cap of " +
                            std::to_string(options.max_omega) +
                            "; shrink the network or raise the cap");
  }
  const HessianBundle hb = hessian(weights, data.x, data.y, noise, config);
  HessianAudit a;
  a.omega = omega;
  a.margin_ok = hb.margin.ok;
  a.min_abs_u = hb.margin.min_abs_u;
  a.max_abs = max_abs(hb.hessian);
  a.identically_zero = a.max_abs == 0.0;
  for (std::size_t i = 0; i < omega; ++i)
    for (std::size_t j = i + 1; j < omega; ++j)
      a.symmetry_defect = std::max(a.symmetry_defect, std::abs(hb.hessian(i, j) - hb.hessian(j, i)));
  a.trace_h = trace(hb.hessian);
  a.trace_first_term = trace(hb.first_term);
  const double gf = frobenius_norm(hb.g);
  a.gram_trace = gf * gf / static_cast<double>(data.samples());
  a.trace_residual = std::abs(a.trace_h - a.gram_trace);
  const auto eig = sym_eigenvalues(hb.hessian, 1e-8);
  a.min_eig = eig.front();
  a.max_eig = eig.back();
  if (options.compare_fd) {
    const Matrix fd = fd_hessian(weights, data.x, data.y, noise, config, options.fd_step);
    Matrix diff = fd;
    for (std::size_t k = 0; k < diff.size(); ++k) diff.data()[k] -= hb.hessian.data()[k];
    const double denom = frobenius_norm(fd);
    a.fd_rel_err = denom > 0.0 ? frobenius_norm(diff) / denom : frobenius_norm(diff);
  }
  return a;
}

// ---------------------------------------------------------------------------
// Randomized almost-everywhere rank verification

enum class AeVariant {
  one_hidden,  // L = 2, N <= d_0 d_1, check rank(A_1 o X)
  deep,        // L >= 3, N <= d_{L-2} d_{L-1}, check rank(G_{L-1})
  weakened,    // as deep but noise only in layer L-1; N <= d_{L-1} min_{l<=L-2} d_l
};

inline const char* to_string(AeVariant v) {
  switch (v) {
    case AeVariant::one_hidden: return "one_hidden";
    case AeVariant::deep: return "deep";
    case AeVariant::weakened: return "weakened";
  }
  return "unknown";
}

struct AeCheckSpec {
  AeVariant variant = AeVariant::one_hidden;
  std::vector<std::size_t> widths;
  std::size_t samples = 0;
  std::size_t trials = 100;
  std::size_t weight_redraws = 10;
  double rel_tol = kDefaultRankTol;
  double leaky_slope = 0.01;
  double noise_stddev = 1.0;
  /// Copies sample 1 onto sample 0 (inputs and every noise column): a
  /// measure-zero input on which the rank claim must fail.
  bool duplicate_columns = false;
};

struct Counterexample {
  std::size_t trial = 0;
  std::size_t redraw = 0;
  std::uint64_t trial_seed = 0;
  std::size_t rank = 0;
};

struct AeCheckResult {
  bool passed = false;
  std::size_t cases = 0;
  std::size_t full_rank_cases = 0;
  double worst_condition = 0.0;  // largest sigma_max/sigma_min among full-rank cases
  std::vector<Counterexample> counterexamples;
};

inline void validate_ae_spec(const AeCheckSpec& spec) {
  MnnConfig cfg{spec.widths, spec.leaky_slope, {}};
  cfg.validate();
  const std::size_t depth = cfg.depth();
  const auto& d = spec.widths;
  if (spec.samples == 0 || spec.trials == 0 || spec.weight_redraws == 0) {
    throw PreconditionError("randomized_ae_check: samples, trials and redraws must be >= 1");
  }
  if (spec.duplicate_columns && spec.samples < 2) {
    throw PreconditionError("randomized_ae_check: duplicating columns needs N >= 2");
  }
  std::size_t limit = 0;
  switch (spec.variant) {
    case AeVariant::one_hidden:
      if (depth != 2) throw PreconditionError("randomized_ae_check: one_hidden variant needs L = 2");
      limit = d[0] * d[1];
      break;
    case AeVariant::deep:
      if (depth < 3) throw PreconditionError("randomized_ae_check: deep variant needs L >= 3");
      limit = d[depth - 2] * d[depth - 1];
      break;
    case AeVariant::weakened:
      if (depth < 3) throw PreconditionError("randomized_ae_check: weakened variant needs L >= 3");
      limit = d[depth - 1] * *std::min_element(d.begin(), d.begin() + static_cast<std::ptrdiff_t>(depth - 1));
      break;
  }
  if (spec.samples > limit) {
    throw PreconditionError("randomized_ae_check: N = " + std::to_string(spec.samples) +
                            " exceeds the " + to_string(spec.variant) + " bound " +
                            std::to_string(limit));
  }
}

/// Each trial draws fresh X ~ N(0,1), noise and lower-layer weights; each
/// redraw then draws W_{L-1} and checks rank(G_{L-1}) with W_L absorbed
/// (set to ones). For L = 2 this is rank(A_1 o X).
inline AeCheckResult randomized_ae_check(const AeCheckSpec& spec, std::uint64_t seed,
                                         std::size_t threads = 1) {
  validate_ae_spec(spec);
  const std::size_t depth = spec.widths.size() - 1;
  const std::size_t n = spec.samples;
  MnnConfig config{spec.widths, spec.leaky_slope, {NoiseMode::supplied, 0.0, spec.noise_stddev}};

  struct TrialOutcome {
    std::size_t full = 0;
    double worst_condition = 0.0;
    std::vector<Counterexample> bad;
  };
  std::vector<TrialOutcome> outcomes(spec.trials);

  parallel_for(spec.trials, threads, [&](std::size_t t) {
    const std::uint64_t trial_seed = derive_seed(seed, t);
    Rng rng(trial_seed);
    Matrix x(spec.widths[0], n);
    for (double& v : x.data()) v = rng.normal();
    std::vector<Matrix> eps;
    for (std::size_t l = 1; l < depth; ++l) {
      Matrix e(spec.widths[l], n, 1.0);
      const bool random = spec.variant != AeVariant::weakened || l == depth - 1;
      if (random)
        for (double& v : e.data()) v = rng.normal(0.0, spec.noise_stddev);
      eps.push_back(std::move(e));
    }
    if (spec.duplicate_columns) {
      for (std::size_t i = 0; i < x.rows(); ++i) x(i, 0) = x(i, 1);
      for (auto& e : eps)
        for (std::size_t i = 0; i < e.rows(); ++i) e(i, 0) = e(i, 1);
    }
    const NoiseTensors noise(std::move(eps));

    auto draw_layer = [&](std::size_t l) {
      const double bound = std::sqrt(6.0 / static_cast<double>(spec.widths[l - 1]));
      Matrix w(spec.widths[l], spec.widths[l - 1]);
      for (double& v : w.data()) v = rng.uniform(-bound, bound);
      return w;
    };
    std::vector<Matrix> layers;
    for (std::size_t l = 1; l + 1 < depth; ++l) layers.push_back(draw_layer(l));

    TrialOutcome& out = outcomes[t];
    for (std::size_t r = 0; r < spec.weight_redraws; ++r) {
      std::vector<Matrix> all = layers;
      all.push_back(draw_layer(depth - 1));
      all.emplace_back(1, spec.widths[depth - 1], 1.0);
      const Weights w(std::move(all));
      const ForwardTrace trace = forward(w, x, noise, config);
      // With W_L = 1, Delta_{L-1} = A_{L-1}.
      const Matrix g = khatri_rao(trace.slopes(depth - 1), trace.output(depth - 2));
      const auto sv = singular_values(g);
      const std::size_t rank = rank_from_singular_values(sv, spec.rel_tol);
      if (rank == n) {
        ++out.full;
        out.worst_condition = std::max(out.worst_condition, sv.front() / sv.back());
      } else {
        out.bad.push_back({t, r, trial_seed, rank});
      }
    }
  });

  AeCheckResult result;
  for (const auto& o : outcomes) {
    result.full_rank_cases += o.full;
    result.worst_condition = std::max(result.worst_condition, o.worst_condition);
    result.counterexamples.insert(result.counterexamples.end(), o.bad.begin(), o.bad.end());
  }
  result.cases = spec.trials * spec.weight_redraws;
  result.passed = result.full_rank_cases == result.cases;
  return result;
}

}  // namespace dlmlab
