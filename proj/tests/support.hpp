#pragma once

#include <algorithm>
#include <cmath>
#include <cstdint>
#include <span>
#include <vector>

#include "dlmlab/dlmlab.hpp"

namespace testing_support {

using dlmlab::Matrix;

inline Matrix gaussian_matrix(std::size_t r, std::size_t c, std::uint64_t seed) {
  dlmlab::Rng rng(seed);
  Matrix m(r, c);
  for (double& v : m.data()) v = rng.normal();
  return m;
}

inline double rel_err(std::span<const double> a, std::span<const double> b) {
  double num = 0, den = 0;
  for (std::size_t i = 0; i < a.size(); ++i) {
    num += (a[i] - b[i]) * (a[i] - b[i]);
    den += b[i] * b[i];
  }
  return std::sqrt(num) / std::max(std::sqrt(den), 1e-300);
}

inline double rel_err(const Matrix& a, const Matrix& b) { return rel_err(a.data(), b.data()); }

/// Textbook triple loop, independent of the library kernels.
inline Matrix naive_matmul(const Matrix& a, const Matrix& b) {
  Matrix c(a.rows(), b.cols());
  for (std::size_t i = 0; i < a.rows(); ++i)
    for (std::size_t j = 0; j < b.cols(); ++j) {
      long double s = 0;
      for (std::size_t k = 0; k < a.cols(); ++k) s += static_cast<long double>(a(i, k)) * b(k, j);
      c(i, j) = static_cast<double>(s);
    }
  return c;
}

/// Random instance whose hidden pre-activations keep the finite-difference
/// margin, retrying seeds until one qualifies.
struct Instance {
  dlmlab::MnnConfig config;
  dlmlab::Dataset data;
  dlmlab::Weights weights;
  dlmlab::NoiseTensors noise;
};

inline Instance differentiable_instance(std::vector<std::size_t> widths, std::size_t n, double slope,
                                        bool gaussian_noise, std::uint64_t seed, double h = 1e-5) {
  for (std::uint64_t attempt = 0;; ++attempt) {
    const std::uint64_t s = dlmlab::derive_seed(seed, attempt);
    dlmlab::MnnConfig cfg{widths, slope,
                          {gaussian_noise ? dlmlab::NoiseMode::gaussian : dlmlab::NoiseMode::off, 0.0, 1.0}};
    auto data = dlmlab::synthetic_dataset(widths.front(), n, dlmlab::stream_seed(s, dlmlab::Stream::data));
    auto w = dlmlab::init_weights(cfg, dlmlab::stream_seed(s, dlmlab::Stream::init));
    auto noise = dlmlab::sample_noise(cfg, n, dlmlab::stream_seed(s, dlmlab::Stream::noise));
    const auto trace = dlmlab::forward(w, data.x, noise, cfg);
    if (dlmlab::differentiability_margin(w, trace, h).ok) {
      return {cfg, std::move(data), std::move(w), std::move(noise)};
    }
  }
}

}  // namespace testing_support
