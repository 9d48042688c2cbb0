#include "duet/variational.hpp"

#include <gtest/gtest.h>

#include "duet/rng.hpp"
#include "testutil.hpp"

namespace duet {
namespace {

TEST(Posterior, ShapeValidationAndSigma) {
  Tensor mu = Tensor::from({2}, {0.5, -1.0});
  Tensor rho = Tensor::from({2}, {0.0, -5.0});
  GaussianPosterior p(mu, rho);
  Tensor s = p.sigma();
  EXPECT_NEAR(s[0], std::log(2.0), 1e-15);  // softplus(0)
  EXPECT_GT(s[1], 0.0);                     // strictly positive even for very negative rho
  EXPECT_THROW(GaussianPosterior(Tensor({2}), Tensor({3})), std::runtime_error);
}

TEST(Prior, ConstructorsValidate) {
  EXPECT_THROW(Prior::iso_gaussian(0.0), std::runtime_error);
  EXPECT_THROW(Prior::iso_gaussian(-1.0), std::runtime_error);
  EXPECT_THROW(Prior::cauchy(0.0), std::runtime_error);
  EXPECT_THROW(Prior::scale_mixture(1.0, 0.0, 0.5), std::runtime_error);
  EXPECT_THROW(Prior::scale_mixture(1.0, 0.1, 1.5), std::runtime_error);
  EXPECT_THROW(Prior::scale_mixture(1.0, 0.1, -0.1), std::runtime_error);
  EXPECT_EQ(Prior::cauchy(0.7).kind_name(), "cauchy");
}

TEST(SampleWeights, ReconstructionExactAndDeterministic) {
  Rng rng(3);
  GaussianPosterior p(rng.normal_tensor({3, 4}), rng.uniform_tensor({3, 4}, -3.0, 1.0));
  WeightSample s1 = sample_weights(p, 99);
  WeightSample s2 = sample_weights(p, 99);
  EXPECT_EQ(s1.value, s2.value);
  EXPECT_EQ(s1.epsilon, s2.epsilon);
  for (int64_t i = 0; i < s1.value.numel(); ++i)
    EXPECT_EQ(s1.value[i], p.mu[i] + stable_softplus(p.rho[i]) * s1.epsilon[i]);  // bit-exact
  WeightSample s3 = sample_weights(p, 100);
  EXPECT_NE(s3.value, s1.value);
}

TEST(SampleWeights, ZeroNoiseLimit) {
  GaussianPosterior p(Tensor::from({2}, {1.5, -2.5}), Tensor::full({2}, -60.0));
  WeightSample s = sample_weights(p, 1);
  EXPECT_NEAR(s.value[0], 1.5, 1e-12);
  EXPECT_NEAR(s.value[1], -2.5, 1e-12);
}

TEST(SampleWeights, MonteCarloMoments) {
  // mu=1, sigma=2: sample moments from 1e5 draws
  const double rho_for_2 = std::log(std::expm1(2.0));
  GaussianPosterior p(Tensor::from({1}, {1.0}), Tensor::from({1}, {rho_for_2}));
  const int n = 100000;
  double s = 0, s2 = 0;
  for (int i = 0; i < n; ++i) {
    double v = sample_weights(p, derive_seed(777, static_cast<uint64_t>(i))).value[0];
    s += v;
    s2 += v * v;
  }
  const double mean = s / n;
  const double sd = std::sqrt(s2 / n - mean * mean);
  EXPECT_NEAR(mean, 1.0, 0.05);
  EXPECT_NEAR(sd, 2.0, 0.05);
}

TEST(KlGaussianIso, ClosedFormBasics) {
  const double rho1 = std::log(std::expm1(1.0));  // sigma = 1
  GaussianPosterior same(Tensor::from({1}, {0.0}), Tensor::from({1}, {rho1}));
  EXPECT_NEAR(kl_gaussian_iso(same, Prior::iso_gaussian(1.0)), 0.0, 1e-12);
  GaussianPosterior shifted(Tensor::from({1}, {1.0}), Tensor::from({1}, {rho1}));
  EXPECT_NEAR(kl_gaussian_iso(shifted, Prior::iso_gaussian(1.0)), 0.5, 1e-12);
  EXPECT_THROW(kl_gaussian_iso(same, Prior::cauchy(1.0)), std::runtime_error);
}

// Quadrature anchors cross-checked against scipy.integrate.quad.
TEST(KlGaussianIso, MatchesQuadratureAnchors) {
  EXPECT_NEAR(testutil::quad_kl_iso(0.7, 0.9, 1.3), 0.252340164740702, 1e-9);
  EXPECT_NEAR(testutil::quad_kl_iso(-1.2, 0.4, 0.8), 1.443147180559945, 1e-9);
}

TEST(KlGaussianIso, MatchesQuadratureOnRandomCases) {
  Rng rng(2025);
  for (int i = 0; i < 100; ++i) {
    const double mu = rng.uniform(-2.0, 2.0);
    const double sigma = rng.uniform(0.2, 2.0);
    const double sp = rng.uniform(0.3, 2.0);
    GaussianPosterior p(Tensor::from({1}, {mu}),
                        Tensor::from({1}, {std::log(std::expm1(sigma))}));
    const double closed = kl_gaussian_iso(p, Prior::iso_gaussian(sp));
    EXPECT_NEAR(closed, testutil::quad_kl_iso(mu, sigma, sp), 1e-6) << "case " << i;
    EXPECT_GE(closed, -1e-12);
  }
}

TEST(LogPriorDensity, PointValues) {
  Tensor zero = Tensor::from({1}, {0.0});
  EXPECT_NEAR(log_prior_density(Prior::cauchy(1.0), zero), -1.1447298858494002, 1e-12);
  // log(0.5 N(0|0,1) + 0.5 N(0|0,0.01)), computed by direct evaluation
  EXPECT_NEAR(log_prior_density(Prior::scale_mixture(1.0, 0.1, 0.5), zero),
              0.7858095590337526, 1e-12);
}

TEST(LogPriorDensity, MixtureDegenerations) {
  Rng rng(8);
  Tensor w = rng.normal_tensor({50});
  EXPECT_NEAR(log_prior_density(Prior::scale_mixture(1.3, 0.2, 1.0), w),
              log_prior_density(Prior::iso_gaussian(1.3), w), 1e-12);
  EXPECT_NEAR(log_prior_density(Prior::scale_mixture(1.3, 0.2, 0.0), w),
              log_prior_density(Prior::iso_gaussian(0.2), w), 1e-12);
}

TEST(KlMonteCarlo, IdenticalDistributionsGiveZero) {
  const double rho1 = std::log(std::expm1(1.0));
  GaussianPosterior p(Tensor::from({3}, {0.0, 0.0, 0.0}), Tensor::full({3}, rho1));
  for (uint64_t s = 0; s < 20; ++s) {
    WeightSample ws = sample_weights(p, s);
    EXPECT_NEAR(kl_monte_carlo(p, Prior::iso_gaussian(1.0), ws), 0.0, 1e-9);
  }
}

TEST(KlMonteCarlo, ConvergesToClosedFormIso) {
  // KL(N(3,1)||N(0,1)) = 4.5; single-sample estimator sd is 3, so 1e4 draws
  // put the standard error near 0.03 (well inside the 2% band of 0.09).
  const double rho1 = std::log(std::expm1(1.0));
  GaussianPosterior p(Tensor::from({1}, {3.0}), Tensor::from({1}, {rho1}));
  Prior prior = Prior::iso_gaussian(1.0);
  const double closed = kl_gaussian_iso(p, prior);
  const int n = 10000;
  double acc = 0;
  for (int i = 0; i < n; ++i)
    acc += kl_monte_carlo(p, prior, sample_weights(p, derive_seed(31337, static_cast<uint64_t>(i))));
  const double mc = acc / n;
  EXPECT_LT(std::abs(mc - closed) / closed, 0.02);
}

TEST(KlMonteCarlo, MatchesQuadratureForCauchyAndMixture) {
  // anchors from scipy.integrate.quad on q log(q/p)
  const double rho1 = std::log(std::expm1(1.0));
  GaussianPosterior p1(Tensor::from({1}, {0.0}), Tensor::from({1}, {rho1}));
  const int n = 200000;
  double acc = 0;
  for (int i = 0; i < n; ++i)
    acc += kl_monte_carlo(p1, Prior::cauchy(1.0),
                          sample_weights(p1, derive_seed(555, static_cast<uint64_t>(i))));
  EXPECT_LT(std::abs(acc / n - 0.25924453248886736) / 0.25924453248886736, 0.02);

  GaussianPosterior p2(Tensor::from({1}, {0.3}),
                       Tensor::from({1}, {std::log(std::expm1(0.5))}));
  acc = 0;
  for (int i = 0; i < n; ++i)
    acc += kl_monte_carlo(p2, Prior::scale_mixture(1.0, 0.1, 0.6),
                          sample_weights(p2, derive_seed(556, static_cast<uint64_t>(i))));
  EXPECT_LT(std::abs(acc / n - 0.43306987858587687) / 0.43306987858587687, 0.02);
}

TEST(ElboLoss, ArithmeticAndValidation) {
  EXPECT_DOUBLE_EQ(elbo_loss(0.0, 2.0, 1.0), 2.0);
  EXPECT_DOUBLE_EQ(elbo_loss(3.0, 1.0, 1.0 / 3.0), 2.0);
  EXPECT_THROW(elbo_loss(1.0, 1.0, 0.0), std::runtime_error);
  EXPECT_THROW(elbo_loss(1.0, 1.0, -0.5), std::runtime_error);
}

// The assembled training loss (kl_weight * KL + BCE through a reparameterized
// conv) must differentiate correctly end to end.
TEST(ElboLoss, AssembledLossMatchesFiniteDifferences) {
  testutil::GraphCase c;
  Rng rng(42);
  const Shape ws = {2, 1, 3, 3};
  int mu = c.g.leaf("mu", ws);
  int rho = c.g.leaf("rho", ws);
  int x = c.g.leaf("x", {1, 1, 6, 6});
  int t = c.g.leaf("t", {1, 2, 6, 6});
  Tensor eps = rng.normal_tensor(ws);
  int phi = c.g.add(mu, c.g.mul(c.g.softplus(rho), c.g.constant(eps, "eps")));
  int logits = c.g.conv2d(x, phi, 1, 1, 1);
  int bce = c.g.bce_with_logits(logits, t);
  int kl = c.g.kl_iso_closed(mu, rho, 1.0);
  c.loss = c.g.add(c.g.mul_scalar(kl, 0.125), bce);
  c.leaf_ids = {mu, rho, x};
  c.leaf_values[mu] = rng.normal_tensor(ws);
  c.leaf_values[rho] = rng.uniform_tensor(ws, -3.0, 0.5);
  c.leaf_values[x] = rng.uniform_tensor({1, 1, 6, 6}, -1.0, 1.0);
  c.leaf_values[t] = rng.uniform_tensor({1, 2, 6, 6}, 0.0, 1.0);
  EXPECT_LT(testutil::finite_diff_max_rel_err(c, 1e-6), 1e-4);
}

// The graph-side variational ops and the tensor-side functions must agree, or
// training would optimize a different objective than the one reported.
TEST(Consistency, GraphOpsMatchFreeFunctions) {
  Rng rng(17);
  GaussianPosterior p(rng.normal_tensor({4, 3}), rng.uniform_tensor({4, 3}, -2.5, 0.5));
  WeightSample s = sample_weights(p, 7);

  Graph g;
  int mu = g.leaf("mu", {4, 3});
  int rho = g.leaf("rho", {4, 3});
  int phi = g.leaf("phi", {4, 3});
  int lq = g.gaussian_logq(mu, rho, phi);
  int iso = g.log_prior_iso(phi, 1.2);
  int cau = g.log_prior_cauchy(phi, 0.9);
  int mix = g.log_prior_mixture(phi, 1.0, 0.1, 0.5);
  int kl = g.kl_iso_closed(mu, rho, 1.2);
  auto vals = g.forward({{mu, &p.mu}, {rho, &p.rho}, {phi, &s.value}});

  EXPECT_NEAR(vals[lq].value(), log_posterior_density(p, s.value), 1e-12);
  EXPECT_NEAR(vals[iso].value(), log_prior_density(Prior::iso_gaussian(1.2), s.value), 1e-12);
  EXPECT_NEAR(vals[cau].value(), log_prior_density(Prior::cauchy(0.9), s.value), 1e-12);
  EXPECT_NEAR(vals[mix].value(), log_prior_density(Prior::scale_mixture(1.0, 0.1, 0.5), s.value), 1e-12);
  EXPECT_NEAR(vals[kl].value(), kl_gaussian_iso(p, Prior::iso_gaussian(1.2)), 1e-12);
  EXPECT_NEAR(vals[lq].value() - vals[cau].value(),
              kl_monte_carlo(p, Prior::cauchy(0.9), s), 1e-12);
}

TEST(InitPosterior, ScalesWithFanIn) {
  Rng rng(5);
  GaussianPosterior p = init_posterior({8, 4, 3, 3}, 4 * 3 * 3, rng);
  double s2 = 0;
  for (int64_t i = 0; i < p.mu.numel(); ++i) s2 += p.mu[i] * p.mu[i];
  const double sd = std::sqrt(s2 / p.mu.numel());
  EXPECT_NEAR(sd, std::sqrt(2.0 / 36.0), 0.05);
  for (int64_t i = 0; i < p.rho.numel(); ++i)
    EXPECT_NEAR(stable_softplus(p.rho[i]), 0.01, 1e-12);
}

}  // namespace
}  // namespace duet
