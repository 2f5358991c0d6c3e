#pragma once

// First- and second-order structure of the MSE at a fixed activation pattern.
//
// delta_l^{(n)} = diag(a_l) W_{l+1}^T diag(a_{l+1}) ... W_L^T a_L   (delta_L = 1)
// G_l = Delta_l o V_{l-1}                    (Khatri-Rao, d_{l-1}d_l x N)
// grad_{w_l} MSE = G_l e / N                 (w_l = row-major vec of W_l)
// H_{ml} = E[e Lambda_{ml}] + G_m G_l^T / N, Lambda_{ll} = 0.

#include <algorithm>
#include <cmath>
#include <cstddef>
#include <span>
#include <string>
#include <utility>
#include <vector>

#include "dlmlab/errors.hpp"
#include "dlmlab/linalg.hpp"
#include "dlmlab/model.hpp"

namespace dlmlab {

inline constexpr double kDefaultFdStep = 1e-5;

/// Delta_1..Delta_L (index l-1), Delta_l is d_l x N.
inline std::vector<Matrix> compute_deltas(const Weights& weights, const ForwardTrace& trace) {
  const std::size_t depth = trace.depth();
  if (weights.depth() != depth) {
    throw DimensionError("compute_deltas: weights have " + std::to_string(weights.depth()) +
                         " layers, trace has " + std::to_string(depth));
  }
  std::vector<Matrix> deltas(depth);
  deltas[depth - 1] = trace.slopes(depth);
  for (std::size_t l = depth - 1; l >= 1; --l) {
    const Matrix& w_above = weights.layer(l + 1);
    if (w_above.rows() != deltas[l].rows() || w_above.cols() != trace.slopes(l).rows()) {
      throw DimensionError("compute_deltas: W_" + std::to_string(l + 1) + " is " +
                           w_above.shape() + ", inconsistent with the trace");
    }
    deltas[l - 1] = hadamard(trace.slopes(l), matmul_tn(w_above, deltas[l]));
  }
  return deltas;
}

/// G_l = Delta_l o V_{l-1}, l = 1..L.
inline Matrix g_matrix(std::size_t l, const ForwardTrace& trace,
                       std::span<const Matrix> deltas) {
  if (l == 0 || l > deltas.size()) {
    throw PreconditionError("g_matrix: layer " + std::to_string(l) + " out of range");
  }
  return khatri_rao(deltas[l - 1], trace.output(l - 1));
}

/// G = [G_1; ...; G_L], omega x N.
inline Matrix stacked_g(const ForwardTrace& trace, std::span<const Matrix> deltas) {
  std::vector<Matrix> blocks;
  blocks.reserve(deltas.size());
  for (std::size_t l = 1; l <= deltas.size(); ++l) blocks.push_back(g_matrix(l, trace, deltas));
  return vstack(blocks);
}

/// Everything one loss evaluation produces.
struct Evaluation {
  ForwardTrace trace;
  std::vector<Matrix> deltas;
  std::vector<double> error;
  double mse = 0.0;
  /// Per-layer gradients shaped like W_l.
  std::vector<Matrix> layer_gradients;
  /// Flattened gradient in the Weights::flatten() layout.
  std::vector<double> flat_gradient;
};

/// Forward, backward and gradient in one pass. The per-layer gradient is
/// (Delta_l (.) e) V_{l-1}^T / N, whose row-major flattening equals G_l e / N.
inline Evaluation evaluate(const Weights& weights, const Matrix& x, const Matrix& y,
                           const NoiseTensors& noise, const MnnConfig& config) {
  ForwardTrace trace = forward(weights, x, noise, config);
  std::vector<double> e = output_error(trace, y);
  const double loss = mse(e);
  std::vector<Matrix> deltas = compute_deltas(weights, trace);
  const double inv_n = 1.0 / static_cast<double>(x.cols());

  std::vector<Matrix> grads;
  grads.reserve(deltas.size());
  std::vector<double> flat;
  flat.reserve(weights.parameter_count());
  for (std::size_t l = 1; l <= deltas.size(); ++l) {
    Matrix scaled = deltas[l - 1];
    for (std::size_t i = 0; i < scaled.rows(); ++i) {
      auto row = scaled.row(i);
      for (std::size_t n = 0; n < row.size(); ++n) row[n] *= e[n] * inv_n;
    }
    Matrix g = matmul_nt(scaled, trace.output(l - 1));
    flat.insert(flat.end(), g.data().begin(), g.data().end());
    grads.push_back(std::move(g));
  }
  return {std::move(trace), std::move(deltas), std::move(e), loss, std::move(grads),
          std::move(flat)};
}

struct GradientResult {
  std::vector<Matrix> per_layer;
  std::vector<double> flat;
  double mse = 0.0;
};

inline GradientResult gradient(const Weights& weights, const Matrix& x, const Matrix& y,
                               const NoiseTensors& noise, const MnnConfig& config) {
  Evaluation ev = evaluate(weights, x, y, noise, config);
  return {std::move(ev.layer_gradients), std::move(ev.flat_gradient), ev.mse};
}

/// Differentiability margin for a step h: every hidden |u| must exceed
/// 10 h ||w||, so that +-h moves cannot flip an activation.
struct MarginCheck {
  double min_abs_u = 0.0;
  double required = 0.0;
  bool ok = false;
};

inline MarginCheck differentiability_margin(const Weights& weights, const ForwardTrace& trace,
                                            double h) {
  const std::vector<double> w = weights.flatten();
  const double required = 10.0 * h * norm2(w);
  const double m = min_abs_hidden_pre_activation(trace);
  return {m, required, m > required};
}

struct FdGradient {
  std::vector<double> values;
  MarginCheck margin;
  /// False when the margin check failed; values may straddle a kink.
  bool reliable = false;
};

/// Central differences of the MSE along every coordinate of w.
inline FdGradient fd_gradient(const Weights& weights, const Matrix& x, const Matrix& y,
                              const NoiseTensors& noise, const MnnConfig& config,
                              double h = kDefaultFdStep) {
  if (!(h > 0.0)) throw PreconditionError("fd_gradient: step must be positive");
  const ForwardTrace base = forward(weights, x, noise, config);
  const MarginCheck margin = differentiability_margin(weights, base, h);

  std::vector<double> w = weights.flatten();
  std::vector<double> out(w.size());
  auto loss_at = [&](std::span<const double> point) {
    const Weights p = Weights::unflatten(config, point);
    return mse(output_error(forward(p, x, noise, config), y));
  };
  for (std::size_t k = 0; k < w.size(); ++k) {
    const double saved = w[k];
    w[k] = saved + h;
    const double plus = loss_at(w);
    w[k] = saved - h;
    const double minus = loss_at(w);
    w[k] = saved;
    out[k] = (plus - minus) / (2.0 * h);
  }
  return {std::move(out), margin, margin.ok};
}

/// Lambda_{ml}^{(n)} = d^2 e^{(n)} / dw_m dw_l^T for a single sample n.
/// For l < m: delta_m (x) [prod_{l'=l+1}^{m-1} diag(a_l') W_l'] diag(a_l) (x) v_{l-1}^T,
/// a d_{m-1}d_m x d_{l-1}d_l block. Zero for l == m, transpose of (l, m) for l > m.
inline Matrix lambda_block(std::size_t m, std::size_t l, const Weights& weights,
                           const ForwardTrace& trace, std::span<const Matrix> deltas,
                           std::size_t sample) {
  const std::size_t depth = trace.depth();
  if (m == 0 || l == 0 || m > depth || l > depth) {
    throw PreconditionError("lambda_block: layer index out of range");
  }
  if (sample >= trace.samples()) throw PreconditionError("lambda_block: sample out of range");
  const std::size_t rows_m = weights.layer(m).size();
  const std::size_t cols_l = weights.layer(l).size();
  if (m == l) return Matrix(rows_m, cols_l);
  if (l > m) return lambda_block(l, m, weights, trace, deltas, sample).transpose();

  // mid = [prod diag(a_l') W_l'] diag(a_l), d_{m-1} x d_l.
  const std::size_t dl = weights.layer(l).rows();
  Matrix mid(dl, dl);
  for (std::size_t i = 0; i < dl; ++i) mid(i, i) = trace.slopes(l)(i, sample);
  for (std::size_t k = l + 1; k <= m - 1; ++k) {
    Matrix next = matmul(weights.layer(k), mid);
    for (std::size_t i = 0; i < next.rows(); ++i) {
      const double a = trace.slopes(k)(i, sample);
      for (double& v : next.row(i)) v *= a;
    }
    mid = std::move(next);
  }

  const Matrix& delta = deltas[m - 1];
  const Matrix& below = trace.output(l - 1);
  const std::size_t dm = delta.rows();
  const std::size_t dm1 = mid.rows();
  const std::size_t dl1 = below.rows();
  Matrix out(rows_m, cols_l);
  for (std::size_t i = 0; i < dm; ++i) {
    const double di = delta(i, sample);
    if (di == 0.0) continue;
    for (std::size_t j = 0; j < dm1; ++j) {
      double* orow = out.row(i * dm1 + j).data();
      for (std::size_t p = 0; p < dl; ++p) {
        const double coeff = di * mid(j, p);
        if (coeff == 0.0) continue;
        for (std::size_t q = 0; q < dl1; ++q) orow[p * dl1 + q] = coeff * below(q, sample);
      }
    }
  }
  return out;
}

struct HessianBundle {
  Matrix hessian;      // omega x omega
  Matrix first_term;   // E[e Lambda]
  Matrix second_term;  // G G^T / N
  Matrix g;            // stacked G
  std::vector<std::size_t> offsets;  // start of each layer block, plus omega at the end
  MarginCheck margin;

  /// H_{ml}, 1-based layers.
  Matrix block(std::size_t m, std::size_t l) const {
    const std::size_t r0 = offsets.at(m - 1), r1 = offsets.at(m);
    const std::size_t c0 = offsets.at(l - 1), c1 = offsets.at(l);
    Matrix out(r1 - r0, c1 - c0);
    for (std::size_t i = r0; i < r1; ++i)
      for (std::size_t j = c0; j < c1; ++j) out(i - r0, j - c0) = hessian(i, j);
    return out;
  }
};

/// Dense Hessian of the MSE from the Lambda blocks, assembled per sample.
inline HessianBundle hessian(const Weights& weights, const Matrix& x, const Matrix& y,
                             const NoiseTensors& noise, const MnnConfig& config) {
  const Evaluation ev = evaluate(weights, x, y, noise, config);
  const std::size_t depth = config.depth();
  const std::size_t omega = config.parameter_count();
  const std::size_t n = x.cols();
  const double inv_n = 1.0 / static_cast<double>(n);

  std::vector<std::size_t> offsets(depth + 1, 0);
  for (std::size_t l = 1; l <= depth; ++l) offsets[l] = offsets[l - 1] + weights.layer(l).size();

  Matrix first(omega, omega);
  for (std::size_t s = 0; s < n; ++s) {
    const double weight = ev.error[s] * inv_n;
    if (weight == 0.0) continue;
    for (std::size_t m = 2; m <= depth; ++m) {
      for (std::size_t l = 1; l < m; ++l) {
        const Matrix lam = lambda_block(m, l, weights, ev.trace, ev.deltas, s);
        for (std::size_t i = 0; i < lam.rows(); ++i)
          for (std::size_t j = 0; j < lam.cols(); ++j) {
            const double v = weight * lam(i, j);
            first(offsets[m - 1] + i, offsets[l - 1] + j) += v;
            first(offsets[l - 1] + j, offsets[m - 1] + i) += v;
          }
      }
    }
  }

  Matrix g = stacked_g(ev.trace, ev.deltas);
  Matrix second = matmul_nt(g, g);
  for (double& v : second.data()) v *= inv_n;
  Matrix h = first;
  for (std::size_t k = 0; k < h.size(); ++k) h.data()[k] += second.data()[k];
  h.ensure_finite();

  MarginCheck margin = differentiability_margin(weights, ev.trace, kDefaultFdStep);
  return {std::move(h), std::move(first), std::move(second), std::move(g), std::move(offsets),
          margin};
}

/// Central differences of the analytic gradient, symmetrized.
inline Matrix fd_hessian(const Weights& weights, const Matrix& x, const Matrix& y,
                         const NoiseTensors& noise, const MnnConfig& config,
                         double h = kDefaultFdStep) {
  if (!(h > 0.0)) throw PreconditionError("fd_hessian: step must be positive");
  std::vector<double> w = weights.flatten();
  const std::size_t omega = w.size();
  Matrix out(omega, omega);
  for (std::size_t k = 0; k < omega; ++k) {
    const double saved = w[k];
    w[k] = saved + h;
    const auto plus = gradient(Weights::unflatten(config, w), x, y, noise, config).flat;
    w[k] = saved - h;
    const auto minus = gradient(Weights::unflatten(config, w), x, y, noise, config).flat;
    w[k] = saved;
    for (std::size_t i = 0; i < omega; ++i) out(i, k) = (plus[i] - minus[i]) / (2.0 * h);
  }
  for (std::size_t i = 0; i < omega; ++i)
    for (std::size_t j = i + 1; j < omega; ++j) {
      const double avg = 0.5 * (out(i, j) + out(j, i));
      out(i, j) = avg;
      out(j, i) = avg;
    }
  return out;
}

}  // namespace dlmlab
