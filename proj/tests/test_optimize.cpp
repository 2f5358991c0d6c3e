#include <gtest/gtest.h>

#include <cmath>

#include "support.hpp"

using namespace dlmlab;

namespace {

Weights scalar(double v) { return Weights{{Matrix(1, 1, v)}}; }

std::size_t count_zero_loss(const std::vector<double>& mses, double tol) {
  std::size_t k = 0;
  for (double m : mses) k += m < tol;
  return k;
}

}  // namespace

TEST(GdStep, ZeroGradientIsFixedPoint) {
  const MnnConfig cfg{{3, 4, 1}, 0.0, {}};
  const Weights w = init_weights(cfg, 1);
  EXPECT_EQ(gd_step(w, std::vector<double>(cfg.parameter_count(), 0.0), 0.3), w);
  EXPECT_THROW(gd_step(w, std::vector<double>(3, 0.0), 0.3), DimensionError);
}

TEST(GdStep, QuadraticConverges) {
  // f(w) = (w - 3)^2 / 2 at lr 0.5 halves the gap every step.
  Weights w = scalar(0.0);
  std::size_t steps = 0;
  while (std::abs(w.layer(1)(0, 0) - 3.0) > 1e-12 && steps < 60) {
    const double g = w.layer(1)(0, 0) - 3.0;
    w = gd_step(w, std::vector<double>{g}, 0.5);
    ++steps;
  }
  EXPECT_LE(steps, 60u);
  EXPECT_NEAR(w.layer(1)(0, 0), 3.0, 1e-12);
}

TEST(GdStep, MovesAgainstTheGradient) {
  const auto inst = testing_support::differentiable_instance({3, 4, 1}, 6, 0.1, false, 3);
  const auto g = gradient(inst.weights, inst.data.x, inst.data.y, inst.noise, inst.config);
  const Weights next = gd_step(inst.weights, g.flat, 1e-3);
  const auto a = inst.weights.flatten(), b = next.flatten();
  double dot = 0;
  for (std::size_t k = 0; k < a.size(); ++k) dot += (b[k] - a[k]) * g.flat[k];
  EXPECT_LE(dot, 0.0);
}

TEST(AdamStep, FirstStepIsSignedLearningRate) {
  const std::vector<double> g{0.3, -2.0, 1e-3};
  const Weights w{{Matrix(1, 3, 0.0)}};
  AdamState st(3);
  AdamParams p;
  p.lr = 0.01;
  const Weights next = adam_step(st, w, g, p);
  for (std::size_t k = 0; k < 3; ++k) {
    EXPECT_NEAR(next.layer(1)(0, k), -0.01 * (g[k] > 0 ? 1 : -1), 1e-7);
  }
  EXPECT_EQ(st.t, 1u);
}

TEST(AdamStep, ZeroGradientAndQuadratic) {
  AdamState zs(1);
  EXPECT_EQ(adam_step(zs, scalar(2.0), std::vector<double>{0.0}, {}), scalar(2.0));

  AdamState st(1);
  AdamParams p;
  p.lr = 1e-2;
  Weights w = scalar(0.0);
  for (int t = 0; t < 5000; ++t) w = adam_step(st, w, std::vector<double>{w.layer(1)(0, 0) - 3.0}, p);
  EXPECT_NEAR(w.layer(1)(0, 0), 3.0, 1e-6);
}

TEST(LrSchedule, ConstantThenGeometric) {
  TrainConfig c;
  c.learning_rate = 0.1;
  EXPECT_EQ(lr_schedule(123456, c), 0.1);
  c.lr_decay = LrDecay{5000, 0.999};
  EXPECT_EQ(lr_schedule(4999, c), 0.1);
  EXPECT_EQ(lr_schedule(5000, c), 0.1);
  EXPECT_NEAR(lr_schedule(6000, c), 0.1 * 0.36769542477096373, 1e-15);
  double prev = lr_schedule(0, c);
  for (std::size_t e = 1; e < 8000; e += 7) {
    const double now = lr_schedule(e, c);
    ASSERT_LE(now, prev);
    prev = now;
  }
  c.lr_decay->factor = 1.5;
  EXPECT_THROW(lr_schedule(6000, c), PreconditionError);
  c.lr_decay->factor = 0.0;
  EXPECT_THROW(lr_schedule(6000, c), PreconditionError);
}

TEST(Train, ZeroLearningRateLeavesWeights) {
  const MnnConfig cfg = MnnConfig::training({4, 5, 1});
  const Dataset d = synthetic_dataset(4, 12, 1);
  const Weights w0 = init_weights(cfg, 2);
  TrainConfig tc;
  tc.learning_rate = 0.0;
  tc.epochs = 20;
  for (auto opt : {Optimizer::gd, Optimizer::adam}) {
    tc.optimizer = opt;
    const auto r = train(tc, d, cfg, w0, NoiseTensors::ones(cfg, 12));
    EXPECT_EQ(r.weights, w0);
    EXPECT_EQ(r.log.epochs_run(), 20u);
    for (const auto& rec : r.log.records) EXPECT_EQ(rec.mse, r.log.initial().mse);
  }
}

TEST(Train, FrozenLayersAreBitIdentical) {
  const MnnConfig cfg = MnnConfig::theory({4, 5, 3, 1});
  const Dataset d = synthetic_dataset(4, 10, 3);
  const auto noise = sample_noise(cfg, 10, 4);
  const Weights w0 = init_weights(cfg, 5);
  TrainConfig tc;
  tc.learning_rate = 0.01;
  tc.epochs = 50;
  tc.freeze_mask = {true, false, false};
  const auto r = train(tc, d, cfg, w0, noise);
  EXPECT_EQ(r.weights.layer(1), w0.layer(1));
  EXPECT_NE(r.weights.layer(2), w0.layer(2));

  tc.freeze_mask = {true, true, true};
  const auto all = train(tc, d, cfg, w0, noise);
  EXPECT_EQ(all.weights, w0);
  for (const auto& rec : all.log.records) EXPECT_EQ(rec.mse, all.log.initial().mse);

  tc.freeze_mask = {true};
  EXPECT_THROW(train(tc, d, cfg, w0, noise), PreconditionError);
}

TEST(Train, DeterministicIncludingMinibatches) {
  const MnnConfig cfg = MnnConfig::training({3, 6, 1});
  const Dataset d = synthetic_dataset(3, 30, 6);
  const Weights w0 = init_weights(cfg, 7);
  TrainConfig tc;
  tc.epochs = 30;
  tc.batch_size = 8;
  tc.seed = 11;
  const auto a = train(tc, d, cfg, w0, NoiseTensors::ones(cfg, 30));
  const auto b = train(tc, d, cfg, w0, NoiseTensors::ones(cfg, 30));
  EXPECT_EQ(a.weights, b.weights);
  ASSERT_EQ(a.log.records.size(), b.log.records.size());
  for (std::size_t k = 0; k < a.log.records.size(); ++k) EXPECT_EQ(a.log.records[k].mse, b.log.records[k].mse);
  tc.seed = 12;
  EXPECT_NE(train(tc, d, cfg, w0, NoiseTensors::ones(cfg, 30)).weights, a.weights);
}

TEST(Train, DivergenceAbortsCleanly) {
  const MnnConfig cfg = MnnConfig::training({3, 6, 1});
  const Dataset d = synthetic_dataset(3, 10, 1);
  TrainConfig tc;
  tc.optimizer = Optimizer::gd;
  tc.learning_rate = 1e150;
  tc.epochs = 50;
  const auto r = train(tc, d, cfg, init_weights(cfg, 2), NoiseTensors::ones(cfg, 10));
  EXPECT_EQ(r.log.status, TrainStatus::aborted_nonfinite);
  EXPECT_FALSE(r.log.diagnostic.empty());
  EXPECT_LT(r.log.epochs_run(), 50u);
}

TEST(Train, StopsOnMinLrAndOnZeroMce) {
  const MnnConfig cfg = MnnConfig::training({3, 6, 1});
  const Dataset d = synthetic_dataset(3, 10, 1);
  TrainConfig tc;
  tc.optimizer = Optimizer::gd;
  tc.learning_rate = 0.01;
  tc.epochs = 1000;
  tc.lr_decay = LrDecay{10, 0.5};
  tc.min_lr = 1e-4;
  const auto r = train(tc, d, cfg, init_weights(cfg, 2), NoiseTensors::ones(cfg, 10));
  EXPECT_EQ(r.log.status, TrainStatus::stopped_min_lr);
  EXPECT_EQ(r.log.epochs_run(), 16u);

  TrainConfig adam;
  adam.learning_rate = 0.01;
  adam.epochs = 5000;
  adam.stop_on_mce_zero = true;
  const auto s = train(adam, d, cfg, init_weights(cfg, 2), NoiseTensors::ones(cfg, 10));
  EXPECT_EQ(s.log.status, TrainStatus::stopped_mce_zero);
  EXPECT_EQ(s.log.last().mce, 0.0);
}

// Worked example: (4,5,1), N = 20 = d_0 d_1, Adam, full batch, MSE < 1e-6 in
// at least 9 of 10 seeds.
TEST(Train, TwoLayerCriticalSampleCountReachesZeroLoss) {
  const MnnConfig cfg = MnnConfig::training({4, 5, 1});
  TrainConfig tc;
  tc.learning_rate = 1e-2;
  tc.epochs = 4000;
  std::vector<double> mses;
  for (std::uint64_t s = 0; s < 10; ++s) {
    const Dataset d = synthetic_dataset(4, 20, stream_seed(s, Stream::data));
    const auto r = train(tc, d, cfg, init_weights(cfg, stream_seed(s, Stream::init)), NoiseTensors::ones(cfg, 20));
    mses.push_back(r.log.last().mse);
  }
  EXPECT_GE(count_zero_loss(mses, 1e-6), 9u);
}

TEST(PerturbWeights, BoundedAndReproducible) {
  const MnnConfig cfg{{100, 100, 1}, 0.0, {}};
  const Weights z = Weights::zeros(cfg);
  const Weights p = perturb_weights(z, 1e-3, 4);
  double worst = 0;
  for (std::size_t l = 1; l <= 2; ++l)
    for (double v : p.layer(l).data()) worst = std::max(worst, std::abs(v));
  EXPECT_LT(worst, 6e-3);
  EXPECT_GT(worst, 0.0);
  EXPECT_EQ(p, perturb_weights(z, 1e-3, 4));
  EXPECT_NE(p, perturb_weights(z, 1e-3, 5));
  EXPECT_THROW(perturb_weights(z, 0.0, 1), PreconditionError);
}

// Zero weights are a critical point of a deep net; a small perturbation is
// enough for the last two layers to fit N < d_1 d_2.
TEST(PerturbWeights, EscapesTheZeroCriticalPoint) {
  const MnnConfig cfg = MnnConfig::theory({4, 5, 4, 1});
  const Dataset d = synthetic_dataset(4, 8, 21);
  const auto noise = sample_noise(cfg, 8, 22);
  TrainConfig tc;
  tc.learning_rate = 0.03;
  tc.epochs = 20000;
  tc.lr_decay = LrDecay{10000, 0.9995};
  tc.freeze_mask = {true, false, false};
  const auto stuck = train(tc, d, cfg, Weights::zeros(cfg), noise);
  EXPECT_EQ(stuck.weights, Weights::zeros(cfg));
  const auto r = train(tc, d, cfg, perturb_weights(Weights::zeros(cfg), 1e-3, 23), noise);
  EXPECT_LT(r.log.last().mse, 1e-8);
}

TEST(Probe, LinearNetworkReachesCertifiedZeroLoss) {
  // s = 1 and no noise: a linear model with d_0 >= N interpolates.
  const MnnConfig cfg{{8, 6, 1}, 1.0, {}};
  const Dataset d = synthetic_dataset(8, 6, 31);
  ProbeConfig p;
  p.learning_rate = 0.05;
  p.decay_start = 4000;
  p.decay_factor = 0.99;
  const auto r = dlm_probe(p, d, cfg, init_weights(cfg, 32), NoiseTensors::ones(cfg, 6));
  EXPECT_EQ(r.certificate.verdict, Verdict::dlm_zero_loss) << "mse " << r.certificate.final_mse;
  EXPECT_EQ(r.log.status, TrainStatus::stopped_min_lr);
}

TEST(Probe, InfeasibleTinyNetIsNeverInconsistent) {
  const MnnConfig cfg = MnnConfig::theory({1, 1, 1});
  ProbeConfig p;
  p.learning_rate = 0.05;
  p.decay_start = 2000;
  p.decay_factor = 0.99;
  for (std::uint64_t s = 0; s < 5; ++s) {
    const Dataset d = synthetic_dataset(1, 50, stream_seed(s, Stream::data));
    const auto noise = sample_noise(cfg, 50, stream_seed(s, Stream::noise));
    const auto r = dlm_probe(p, d, cfg, init_weights(cfg, stream_seed(s, Stream::init)), noise);
    EXPECT_NE(r.certificate.verdict, Verdict::inconsistent_with_theorem);
    EXPECT_NE(r.certificate.verdict, Verdict::dlm_zero_loss);
    EXPECT_EQ(derive_verdict(r.certificate), r.certificate.verdict);
  }
}

TEST(Probe, EpochBudget) {
  ProbeConfig p;
  p.learning_rate = 0.1;
  p.decay_start = 10;
  p.decay_factor = 0.5;
  p.min_lr = 0.01;
  EXPECT_EQ(p.total_epochs(), 10u + 4u + 1u);
  p.decay_factor = 1.0;
  EXPECT_THROW(p.total_epochs(), PreconditionError);
}
