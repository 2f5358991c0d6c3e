#include <gtest/gtest.h>

#include <cmath>

#include "support.hpp"

using namespace dlmlab;
using testing_support::gaussian_matrix;
using testing_support::rel_err;

namespace {

// x = 1, W_1 = -2, W_2 = 3, eps = 1, s = 0.5.
struct ScalarNet {
  MnnConfig config{{1, 1, 1}, 0.5, {}};
  Weights w{{Matrix(1, 1, -2.0), Matrix(1, 1, 3.0)}};
  Matrix x{1, 1, 1.0};
  NoiseTensors noise = NoiseTensors::ones(config, 1);
};

}  // namespace

TEST(Rng, DeterministicAndStreamsDiffer) {
  Rng a(42), b(42);
  for (int i = 0; i < 10; ++i) EXPECT_EQ(a.next_u64(), b.next_u64());
  EXPECT_NE(stream_seed(7, Stream::data), stream_seed(7, Stream::init));
  EXPECT_NE(derive_seed(7, 0), derive_seed(7, 1));
  Rng c(1);
  for (int i = 0; i < 1000; ++i) {
    const double u = c.uniform01();
    ASSERT_GE(u, 0.0);
    ASSERT_LT(u, 1.0);
    ASSERT_LT(c.below(7), 7u);
  }
}

TEST(Rng, PermutationIsAPermutation) {
  Rng r(3);
  auto p = r.permutation(50);
  std::sort(p.begin(), p.end());
  for (std::size_t i = 0; i < 50; ++i) EXPECT_EQ(p[i], i);
}

TEST(MnnConfig, Validation) {
  EXPECT_THROW((MnnConfig{{3, 1}, 0.0, {}}).validate(), PreconditionError);
  EXPECT_THROW((MnnConfig{{3, 4, 2}, 0.0, {}}).validate(), PreconditionError);
  EXPECT_THROW((MnnConfig{{3, 0, 1}, 0.0, {}}).validate(), PreconditionError);
  const MnnConfig ok{{4, 5, 3, 1}, 0.0, {}};
  EXPECT_NO_THROW(ok.validate());
  EXPECT_EQ(ok.parameter_count(), 4u * 5 + 5 * 3 + 3);
}

TEST(Weights, FlattenRoundTripAndRowMajor) {
  const MnnConfig cfg{{3, 4, 2, 1}, 0.0, {}};
  const Weights w = init_weights(cfg, 9);
  const auto flat = w.flatten();
  ASSERT_EQ(flat.size(), cfg.parameter_count());
  EXPECT_EQ(Weights::unflatten(cfg, flat), w);
  EXPECT_EQ(flat[1], w.layer(1)(0, 1));
  EXPECT_EQ(flat[3], w.layer(1)(1, 0));
  EXPECT_EQ(flat[12 + 5], w.layer(2)(1, 1));
  EXPECT_THROW(Weights::unflatten(cfg, std::vector<double>(5)), DimensionError);
}

TEST(InitWeights, UniformBoundAndDeterminism) {
  const MnnConfig cfg{{6, 3, 1}, 0.0, {}};
  const Weights w = init_weights(cfg, 1);
  EXPECT_EQ(w, init_weights(cfg, 1));
  for (double v : w.layer(1).data()) EXPECT_LE(std::abs(v), 1.0);
  EXPECT_NE(w, init_weights(cfg, 2));
}

TEST(InitWeights, VarianceIsTwoOverFanIn) {
  const MnnConfig cfg{{50, 2000, 1}, 0.0, {}};
  const Weights w = init_weights(cfg, 5);
  const auto v = w.layer(1).data();
  double m = 0, s = 0;
  for (double x : v) m += x;
  m /= static_cast<double>(v.size());
  for (double x : v) s += (x - m) * (x - m);
  s /= static_cast<double>(v.size());
  EXPECT_NEAR(s, 2.0 / 50.0, 0.05 * 2.0 / 50.0);
}

TEST(SampleNoise, OffGaussianAndDeterminism) {
  const MnnConfig off{{3, 4, 5, 1}, 0.0, {}};
  const NoiseTensors ones = sample_noise(off, 6, 1);
  for (std::size_t l = 1; l <= 2; ++l)
    for (double v : ones.layer(l).data()) EXPECT_EQ(v, 1.0);

  const MnnConfig gauss{{3, 500, 200, 1}, 0.0, {NoiseMode::gaussian, 0.0, 1.0}};
  const NoiseTensors e = sample_noise(gauss, 50, 77);
  double m = 0, s = 0, cnt = 0;
  for (std::size_t l = 1; l <= 2; ++l)
    for (double v : e.layer(l).data()) {
      m += v;
      s += v * v;
      ++cnt;
    }
  m /= cnt;
  s = s / cnt - m * m;
  EXPECT_NEAR(m, 0.0, 0.02);
  EXPECT_NEAR(s, 1.0, 0.05);

  const NoiseTensors a = sample_noise(gauss, 1, 3), b = sample_noise(gauss, 1, 3);
  EXPECT_EQ(a.layer(1), b.layer(1));
  EXPECT_THROW(sample_noise(MnnConfig{{3, 4, 1}, 0.0, {NoiseMode::gaussian, 0.0, -1.0}}, 2, 1),
               PreconditionError);
}

TEST(ActivationSlopes, Branches) {
  const Matrix u = Matrix::from_rows({{2, -2, 0}});
  const Matrix e = Matrix::from_rows({{1, 1, 3}});
  const Matrix a = activation_slopes(u, e, 0.5);
  EXPECT_EQ(a(0, 0), 1.0);
  EXPECT_EQ(a(0, 1), 0.5);
  EXPECT_EQ(activation_slopes(u, e, 0.0)(0, 2), 3.0);
}

TEST(Forward, ScalarNetHandValues) {
  ScalarNet s;
  const ForwardTrace t = forward(s.w, s.x, s.noise, s.config);
  EXPECT_EQ(t.pre_activation(1)(0, 0), -2.0);
  EXPECT_EQ(t.slopes(1)(0, 0), 0.5);
  EXPECT_EQ(t.output(1)(0, 0), -1.0);
  EXPECT_EQ(t.prediction()(0, 0), -3.0);
  EXPECT_FALSE(t.sign_pattern(1)(0, 0));
  const auto e = output_error(t, Matrix(1, 1, 1.0));
  EXPECT_EQ(e[0], -4.0);
  EXPECT_EQ(mse(e), 8.0);
}

TEST(Forward, ZeroWeightsDeepNet) {
  const MnnConfig cfg{{3, 4, 4, 1}, 0.1, {NoiseMode::gaussian, 0.0, 1.0}};
  const NoiseTensors noise = sample_noise(cfg, 5, 2);
  const ForwardTrace t = forward(Weights::zeros(cfg), gaussian_matrix(3, 5, 1), noise, cfg);
  for (std::size_t l = 1; l <= 3; ++l)
    for (double u : t.pre_activation(l).data()) EXPECT_EQ(u, 0.0);
  EXPECT_EQ(t.slopes(1), noise.layer(1));
  EXPECT_EQ(t.slopes(2), noise.layer(2));
  for (double v : t.prediction().data()) EXPECT_EQ(v, 0.0);
}

TEST(Forward, LinearWhenSlopeOneAndNoNoise) {
  const MnnConfig cfg{{4, 6, 5, 1}, 1.0, {}};
  const Weights w = init_weights(cfg, 3);
  const Matrix x = gaussian_matrix(4, 9, 4);
  const ForwardTrace t = forward(w, x, NoiseTensors::ones(cfg, 9), cfg);
  const Matrix oracle = testing_support::naive_matmul(
      testing_support::naive_matmul(testing_support::naive_matmul(w.layer(3), w.layer(2)), w.layer(1)), x);
  EXPECT_LT(rel_err(t.prediction(), oracle), 1e-12);
}

TEST(Forward, TraceInvariants) {
  const MnnConfig cfg = MnnConfig::theory({4, 6, 5, 1});
  const Weights w = init_weights(cfg, 5);
  const Matrix x = gaussian_matrix(4, 7, 6);
  const NoiseTensors noise = sample_noise(cfg, 7, 7);
  const ForwardTrace t = forward(w, x, noise, cfg);
  for (std::size_t l = 1; l <= 3; ++l) {
    EXPECT_EQ(t.pre_activation(l), matmul(w.layer(l), t.output(l - 1)));
    EXPECT_EQ(t.output(l), hadamard(t.slopes(l), t.pre_activation(l)));
  }
  for (double a : t.slopes(3).data()) EXPECT_EQ(a, 1.0);
  const ForwardTrace again = forward(w, x, noise, cfg);
  EXPECT_EQ(again.prediction(), t.prediction());
  EXPECT_THROW(forward(w, gaussian_matrix(3, 7, 1), noise, cfg), DimensionError);
}

TEST(Forward, PositiveHomogeneityInFirstLayer) {
  const MnnConfig cfg{{3, 5, 1}, 0.2, {NoiseMode::gaussian, 0.0, 1.0}};
  Weights w = init_weights(cfg, 8);
  const Matrix x = gaussian_matrix(3, 6, 9);
  const NoiseTensors noise = sample_noise(cfg, 6, 10);
  const Matrix base = forward(w, x, noise, cfg).prediction();
  for (double& v : w.layer(1).data()) v *= 2.5;
  const Matrix scaled = forward(w, x, noise, cfg).prediction();
  for (std::size_t n = 0; n < 6; ++n) EXPECT_NEAR(scaled(0, n), 2.5 * base(0, n), 1e-12 * std::abs(base(0, n)) + 1e-15);
}

TEST(Forward, AbsorbedSecondLayerReparameterization) {
  // L = 2: output = sum_i a_i (w2_i W1_i . x), i.e. a^T diag(w_2) W_1 x.
  const MnnConfig cfg = MnnConfig::theory({4, 5, 1});
  const Weights w = init_weights(cfg, 11);
  const Matrix x = gaussian_matrix(4, 8, 12);
  const NoiseTensors noise = sample_noise(cfg, 8, 13);
  const ForwardTrace t = forward(w, x, noise, cfg);
  for (std::size_t n = 0; n < 8; ++n) {
    double oracle = 0;
    for (std::size_t i = 0; i < 5; ++i) {
      double wx = 0;
      for (std::size_t j = 0; j < 4; ++j) wx += w.layer(2)(0, i) * w.layer(1)(i, j) * x(j, n);
      oracle += t.slopes(1)(i, n) * wx;
    }
    EXPECT_NEAR(t.prediction()(0, n), oracle, 1e-12 * std::max(1.0, std::abs(oracle)));
  }
}

TEST(Loss, MseAndMce) {
  const std::vector<double> p{1, -1}, y{1, -1};
  EXPECT_EQ(mce(p, y), 0.0);
  const std::vector<double> p3{0.1, -0.2, 0.3}, y3{1, 1, 1};
  EXPECT_DOUBLE_EQ(mce(p3, y3), 1.0 / 3.0);
  const std::vector<double> zero{0.0}, one{1.0};
  EXPECT_EQ(mce(zero, one), 1.0);
  const std::vector<double> bad{0.5};
  EXPECT_THROW(mce(one, bad), PreconditionError);
}

TEST(Loss, ErrorRecomputesExactly) {
  const MnnConfig cfg = MnnConfig::training({3, 4, 1});
  const Weights w = init_weights(cfg, 1);
  const Dataset d = synthetic_dataset(3, 10, 2);
  const auto noise = NoiseTensors::ones(cfg, 10);
  EXPECT_EQ(output_error(forward(w, d.x, noise, cfg), d.y), output_error(forward(w, d.x, noise, cfg), d.y));
  const ForwardTrace t = forward(w, d.x, noise, cfg);
  for (double e : output_error(t, t.prediction())) EXPECT_EQ(e, 0.0);
}
