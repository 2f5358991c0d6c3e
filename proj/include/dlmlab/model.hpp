#pragma once

// Piecewise-linear network with multiplicative slope noise:
//
//   u_l = W_l v_{l-1},   v_l = a_l (.) u_l,   v_0 = x,
//   a_{i,l} = eps_{i,l} * (u_{i,l} >= 0 ? 1 : s)  for l < L,   a_L = 1.
//
// Layers are numbered 1..L throughout the public API (V(0) is the input).
// No bias terms. The output layer is scalar.

#include <cmath>
#include <cstddef>
#include <cstdint>
#include <limits>
#include <span>
#include <string>
#include <utility>
#include <vector>

#include "dlmlab/errors.hpp"
#include "dlmlab/linalg.hpp"
#include "dlmlab/rng.hpp"

namespace dlmlab {

enum class NoiseMode {
  off,       // every eps is 1 (plain leaky ReLU)
  gaussian,  // i.i.d. Normal(mean, stddev^2)
  supplied,  // tensors come from the caller (e.g. constructed instances)
};

struct NoiseSpec {
  NoiseMode mode = NoiseMode::off;
  double mean = 0.0;
  double stddev = 1.0;
};

struct MnnConfig {
  std::vector<std::size_t> widths;  // d_0, ..., d_L with d_L == 1
  double leaky_slope = 0.0;
  NoiseSpec noise;

  /// Number of weight layers L.
  std::size_t depth() const noexcept { return widths.empty() ? 0 : widths.size() - 1; }

  std::size_t width(std::size_t l) const { return widths.at(l); }

  /// omega = sum_l d_{l-1} d_l.
  std::size_t parameter_count() const noexcept {
    std::size_t total = 0;
    for (std::size_t l = 1; l < widths.size(); ++l) total += widths[l - 1] * widths[l];
    return total;
  }

  void validate() const {
    if (widths.size() < 3) {
      throw PreconditionError("MnnConfig: need at least one hidden layer (L >= 2), got " +
                              std::to_string(depth()) + " weight layers");
    }
    for (std::size_t w : widths)
      if (w == 0) throw PreconditionError("MnnConfig: layer widths must be positive");
    if (widths.back() != 1) {
      throw PreconditionError("MnnConfig: output width must be 1, got " +
                              std::to_string(widths.back()));
    }
    if (!std::isfinite(leaky_slope)) throw PreconditionError("MnnConfig: leaky slope not finite");
    if (noise.mode == NoiseMode::gaussian && !(noise.stddev >= 0.0)) {
      throw PreconditionError("MnnConfig: noise stddev must be >= 0");
    }
  }

  /// Defaults for rank experiments: leaky slope 0.01, Normal(0,1) noise.
  static MnnConfig theory(std::vector<std::size_t> widths) {
    return {std::move(widths), 0.01, {NoiseMode::gaussian, 0.0, 1.0}};
  }

  /// Defaults for training experiments: ReLU, no noise.
  static MnnConfig training(std::vector<std::size_t> widths) {
    return {std::move(widths), 0.0, {NoiseMode::off, 0.0, 1.0}};
  }
};

class Weights {
 public:
  Weights() = default;
  explicit Weights(std::vector<Matrix> layers) : layers_(std::move(layers)) {}

  std::size_t depth() const noexcept { return layers_.size(); }

  const Matrix& layer(std::size_t l) const { return layers_.at(l - 1); }
  Matrix& layer(std::size_t l) { return layers_.at(l - 1); }

  std::size_t parameter_count() const noexcept {
    std::size_t n = 0;
    for (const auto& w : layers_) n += w.size();
    return n;
  }

  /// Index of W_l's first entry inside the flattened vector.
  std::size_t offset(std::size_t l) const {
    std::size_t off = 0;
    for (std::size_t k = 1; k < l; ++k) off += layer(k).size();
    return off;
  }

  /// Concatenated row-major flattenings of W_1, ..., W_L.
  std::vector<double> flatten() const {
    std::vector<double> w;
    w.reserve(parameter_count());
    for (const auto& m : layers_) w.insert(w.end(), m.data().begin(), m.data().end());
    return w;
  }

  static Weights unflatten(const MnnConfig& config, std::span<const double> w) {
    if (w.size() != config.parameter_count()) {
      throw DimensionError("Weights::unflatten: got " + std::to_string(w.size()) +
                           " values, config needs " + std::to_string(config.parameter_count()));
    }
    std::vector<Matrix> layers;
    std::size_t off = 0;
    for (std::size_t l = 1; l <= config.depth(); ++l) {
      const std::size_t r = config.widths[l];
      const std::size_t c = config.widths[l - 1];
      layers.emplace_back(r, c, std::vector<double>(w.begin() + off, w.begin() + off + r * c));
      off += r * c;
    }
    return Weights(std::move(layers));
  }

  static Weights zeros(const MnnConfig& config) {
    std::vector<Matrix> layers;
    for (std::size_t l = 1; l <= config.depth(); ++l)
      layers.emplace_back(config.widths[l], config.widths[l - 1]);
    return Weights(std::move(layers));
  }

  void check_shapes(const MnnConfig& config) const {
    if (depth() != config.depth()) {
      throw DimensionError("Weights: " + std::to_string(depth()) + " layers, config has " +
                           std::to_string(config.depth()));
    }
    for (std::size_t l = 1; l <= depth(); ++l) {
      const auto& w = layer(l);
      if (w.rows() != config.widths[l] || w.cols() != config.widths[l - 1]) {
        throw DimensionError("Weights: W_" + std::to_string(l) + " is " + w.shape() +
                             ", expected " +
                             Matrix::shape_string(config.widths[l], config.widths[l - 1]));
      }
    }
  }

  friend bool operator==(const Weights&, const Weights&) = default;

 private:
  std::vector<Matrix> layers_;
};

/// Noise realizations E_1..E_{L-1}, each d_l x N.
class NoiseTensors {
 public:
  NoiseTensors() = default;
  explicit NoiseTensors(std::vector<Matrix> hidden) : hidden_(std::move(hidden)) {}

  std::size_t hidden_layers() const noexcept { return hidden_.size(); }
  std::size_t samples() const noexcept { return hidden_.empty() ? 0 : hidden_.front().cols(); }

  const Matrix& layer(std::size_t l) const { return hidden_.at(l - 1); }
  Matrix& layer(std::size_t l) { return hidden_.at(l - 1); }

  static NoiseTensors ones(const MnnConfig& config, std::size_t n) {
    std::vector<Matrix> hidden;
    for (std::size_t l = 1; l < config.depth(); ++l) hidden.emplace_back(config.widths[l], n, 1.0);
    return NoiseTensors(std::move(hidden));
  }

  NoiseTensors select_columns(std::span<const std::size_t> cols) const {
    std::vector<Matrix> out;
    out.reserve(hidden_.size());
    for (const auto& e : hidden_) out.push_back(dlmlab::select_columns(e, cols));
    return NoiseTensors(std::move(out));
  }

  void check_shapes(const MnnConfig& config, std::size_t n) const {
    if (hidden_.size() + 1 != config.depth()) {
      throw DimensionError("NoiseTensors: " + std::to_string(hidden_.size()) +
                           " hidden layers, config needs " + std::to_string(config.depth() - 1));
    }
    for (std::size_t l = 1; l < config.depth(); ++l) {
      const auto& e = layer(l);
      if (e.rows() != config.widths[l] || e.cols() != n) {
        throw DimensionError("NoiseTensors: E_" + std::to_string(l) + " is " + e.shape() +
                             ", expected " + Matrix::shape_string(config.widths[l], n));
      }
    }
  }

  friend bool operator==(const NoiseTensors&, const NoiseTensors&) = default;

 private:
  std::vector<Matrix> hidden_;
};

/// Realized activation pattern of one layer: true where u >= 0.
struct SignPattern {
  std::size_t rows = 0;
  std::size_t cols = 0;
  std::vector<unsigned char> nonnegative;

  bool operator()(std::size_t i, std::size_t n) const { return nonnegative[i * cols + n] != 0; }
  friend bool operator==(const SignPattern&, const SignPattern&) = default;
};

class ForwardTrace {
 public:
  ForwardTrace(Matrix input, std::vector<Matrix> pre, std::vector<Matrix> slopes,
               std::vector<Matrix> outputs, std::vector<SignPattern> pattern)
      : input_(std::move(input)),
        pre_(std::move(pre)),
        slopes_(std::move(slopes)),
        outputs_(std::move(outputs)),
        pattern_(std::move(pattern)) {}

  std::size_t depth() const noexcept { return pre_.size(); }
  std::size_t samples() const noexcept { return input_.cols(); }

  /// U_l, l = 1..L.
  const Matrix& pre_activation(std::size_t l) const { return pre_.at(l - 1); }
  /// A_l, l = 1..L (A_L is all ones).
  const Matrix& slopes(std::size_t l) const { return slopes_.at(l - 1); }
  /// V_l, l = 0..L (V_0 = X).
  const Matrix& output(std::size_t l) const { return l == 0 ? input_ : outputs_.at(l - 1); }
  /// Network output V_L (1 x N).
  const Matrix& prediction() const { return outputs_.back(); }
  const SignPattern& sign_pattern(std::size_t l) const { return pattern_.at(l - 1); }

  friend bool operator==(const ForwardTrace&, const ForwardTrace&) = default;

 private:
  Matrix input_;
  std::vector<Matrix> pre_;
  std::vector<Matrix> slopes_;
  std::vector<Matrix> outputs_;
  std::vector<SignPattern> pattern_;
};

/// He-style uniform init: W_l entries i.i.d. U[-sqrt(6/d_{l-1}), sqrt(6/d_{l-1})],
/// i.e. mean 0 and variance 2/d_{l-1}.
inline Weights init_weights(const MnnConfig& config, std::uint64_t seed) {
  config.validate();
  Rng rng(seed);
  std::vector<Matrix> layers;
  for (std::size_t l = 1; l <= config.depth(); ++l) {
    const std::size_t fan_in = config.widths[l - 1];
    const double bound = std::sqrt(6.0 / static_cast<double>(fan_in));
    Matrix w(config.widths[l], fan_in);
    for (double& x : w.data()) x = rng.uniform(-bound, bound);
    layers.push_back(std::move(w));
  }
  return Weights(std::move(layers));
}

inline NoiseTensors sample_noise(const MnnConfig& config, std::size_t n, std::uint64_t seed) {
  if (n == 0) throw PreconditionError("sample_noise: need at least one sample");
  switch (config.noise.mode) {
    case NoiseMode::off:
      return NoiseTensors::ones(config, n);
    case NoiseMode::gaussian: {
      if (!(config.noise.stddev >= 0.0)) {
        throw PreconditionError("sample_noise: stddev must be >= 0, got " +
                                std::to_string(config.noise.stddev));
      }
      Rng rng(seed);
      std::vector<Matrix> hidden;
      for (std::size_t l = 1; l < config.depth(); ++l) {
        Matrix e(config.widths[l], n);
        for (double& x : e.data()) x = rng.normal(config.noise.mean, config.noise.stddev);
        hidden.push_back(std::move(e));
      }
      return NoiseTensors(std::move(hidden));
    }
    case NoiseMode::supplied:
      break;
  }
  throw PreconditionError("sample_noise: noise mode 'supplied' has no sampler");
}

/// eps where u >= 0 (including u == 0), eps * s where u < 0.
inline Matrix activation_slopes(const Matrix& pre, const Matrix& noise, double leaky_slope) {
  if (pre.rows() != noise.rows() || pre.cols() != noise.cols()) {
    throw DimensionError("activation_slopes: U is " + pre.shape() + ", E is " + noise.shape());
  }
  Matrix a(pre.rows(), pre.cols());
  auto u = pre.data();
  auto e = noise.data();
  auto out = a.data();
  for (std::size_t k = 0; k < out.size(); ++k) out[k] = u[k] >= 0.0 ? e[k] : e[k] * leaky_slope;
  return a;
}

inline ForwardTrace forward(const Weights& weights, const Matrix& x, const NoiseTensors& noise,
                            const MnnConfig& config) {
  config.validate();
  weights.check_shapes(config);
  if (x.rows() != config.widths[0]) {
    throw DimensionError("forward: X is " + x.shape() + ", expected " +
                         std::to_string(config.widths[0]) + " rows");
  }
  noise.check_shapes(config, x.cols());

  const std::size_t depth = config.depth();
  const std::size_t n = x.cols();
  std::vector<Matrix> pre, slopes, outputs;
  std::vector<SignPattern> pattern;
  pre.reserve(depth);
  slopes.reserve(depth);
  outputs.reserve(depth);
  pattern.reserve(depth);

  for (std::size_t l = 1; l <= depth; ++l) {
    const Matrix& below = l == 1 ? x : outputs.back();
    Matrix u = matmul(weights.layer(l), below);
    SignPattern sp{u.rows(), u.cols(), std::vector<unsigned char>(u.size())};
    for (std::size_t k = 0; k < u.size(); ++k) sp.nonnegative[k] = u.data()[k] >= 0.0 ? 1 : 0;
    Matrix a = l < depth ? activation_slopes(u, noise.layer(l), config.leaky_slope)
                         : Matrix(u.rows(), n, 1.0);
    Matrix v = hadamard(a, u);
    pre.push_back(std::move(u));
    slopes.push_back(std::move(a));
    outputs.push_back(std::move(v));
    pattern.push_back(std::move(sp));
  }
  return ForwardTrace(x, std::move(pre), std::move(slopes), std::move(outputs), std::move(pattern));
}

/// e = v_L - y.
inline std::vector<double> output_error(const ForwardTrace& trace, const Matrix& y) {
  const Matrix& out = trace.prediction();
  if (y.rows() != 1 || y.cols() != out.cols()) {
    throw DimensionError("output_error: y is " + y.shape() + ", prediction is " + out.shape());
  }
  std::vector<double> e(out.cols());
  for (std::size_t n = 0; n < e.size(); ++n) e[n] = out(0, n) - y(0, n);
  return e;
}

/// ||e||^2 / (2N).
inline double mse(std::span<const double> e) {
  if (e.empty()) throw PreconditionError("mse: empty error vector");
  double s = 0.0;
  for (double x : e) s += x * x;
  return s / (2.0 * static_cast<double>(e.size()));
}

/// Fraction of samples whose output sign differs from the +-1 label;
/// a zero output counts as misclassified.
inline double mce(std::span<const double> prediction, std::span<const double> labels) {
  if (prediction.size() != labels.size() || prediction.empty()) {
    throw DimensionError("mce: " + std::to_string(prediction.size()) + " predictions vs " +
                         std::to_string(labels.size()) + " labels");
  }
  std::size_t wrong = 0;
  for (std::size_t n = 0; n < labels.size(); ++n) {
    const double y = labels[n];
    if (y != 1.0 && y != -1.0) {
      throw PreconditionError("mce: label " + std::to_string(y) + " at index " +
                              std::to_string(n) + " is not +-1");
    }
    const double v = prediction[n];
    if (!(v * y > 0.0)) ++wrong;
  }
  return static_cast<double>(wrong) / static_cast<double>(labels.size());
}

/// min |u_{i,l}^{(n)}| over hidden layers l <= L-1.
inline double min_abs_hidden_pre_activation(const ForwardTrace& trace) {
  double best = std::numeric_limits<double>::infinity();
  for (std::size_t l = 1; l < trace.depth(); ++l)
    for (double u : trace.pre_activation(l).data()) best = std::min(best, std::abs(u));
  return best;
}

}  // namespace dlmlab
