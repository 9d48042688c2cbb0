#pragma once

#include <cmath>
#include <stdexcept>
#include <string>

#include "duet/graph.hpp"
#include "duet/rng.hpp"
#include "duet/tensor.hpp"

namespace duet {

// Per-weight Gaussian posterior; sigma = softplus(rho) keeps scales positive
// with bounded gradients.
struct GaussianPosterior {
  Tensor mu;
  Tensor rho;

  GaussianPosterior() = default;
  GaussianPosterior(Tensor mu_, Tensor rho_) : mu(std::move(mu_)), rho(std::move(rho_)) {
    if (!mu.same_shape(rho))
      throw std::runtime_error("GaussianPosterior: mu shape " + shape_str(mu.shape()) +
                               " != rho shape " + shape_str(rho.shape()));
  }

  Tensor sigma() const {
    Tensor s(mu.shape());
    for (int64_t i = 0; i < mu.numel(); ++i) s[i] = stable_softplus(rho[i]);
    return s;
  }
};

struct Prior {
  enum class Kind { kIsoGaussian, kCauchy, kScaleMixture };
  Kind kind = Kind::kIsoGaussian;
  double sigma_p = 1.0;               // IsoGaussian scale
  double kappa = 1.0;                 // Cauchy scale
  double sigma0 = 1.0, sigma1 = 0.1;  // mixture component scales
  double beta = 0.5;                  // mixture weight on component 0

  static Prior iso_gaussian(double sigma_p) {
    require_positive(sigma_p, "sigma_p");
    Prior p;
    p.kind = Kind::kIsoGaussian;
    p.sigma_p = sigma_p;
    return p;
  }
  static Prior cauchy(double kappa) {
    require_positive(kappa, "kappa");
    Prior p;
    p.kind = Kind::kCauchy;
    p.kappa = kappa;
    return p;
  }
  static Prior scale_mixture(double sigma0, double sigma1, double beta) {
    require_positive(sigma0, "sigma0");
    require_positive(sigma1, "sigma1");
    if (beta < 0.0 || beta > 1.0)
      throw std::runtime_error("Prior: beta must lie in [0,1], got " + std::to_string(beta));
    Prior p;
    p.kind = Kind::kScaleMixture;
    p.sigma0 = sigma0;
    p.sigma1 = sigma1;
    p.beta = beta;
    return p;
  }

  std::string kind_name() const {
    switch (kind) {
      case Kind::kIsoGaussian: return "iso";
      case Kind::kCauchy: return "cauchy";
      case Kind::kScaleMixture: return "mixture";
    }
    return "?";
  }

 private:
  static void require_positive(double v, const char* what) {
    if (!(v > 0.0))
      throw std::runtime_error(std::string("Prior: ") + what + " must be positive, got " +
                               std::to_string(v));
  }
};

// phi = mu + softplus(rho) * epsilon, with epsilon kept for pathwise grads.
struct WeightSample {
  Tensor value;
  Tensor epsilon;
};

inline WeightSample sample_weights(const GaussianPosterior& post, uint64_t seed) {
  Rng rng(seed);
  WeightSample s;
  s.epsilon = rng.normal_tensor(post.mu.shape());
  s.value = Tensor(post.mu.shape());
  for (int64_t i = 0; i < s.value.numel(); ++i)
    s.value[i] = post.mu[i] + stable_softplus(post.rho[i]) * s.epsilon[i];
  return s;
}

// Closed-form KL(N(mu, softplus(rho)^2) || N(0, sigma_p^2)), summed over weights.
inline double kl_gaussian_iso(const GaussianPosterior& post, const Prior& prior) {
  if (prior.kind != Prior::Kind::kIsoGaussian)
    throw std::runtime_error("kl_gaussian_iso: prior kind '" + prior.kind_name() +
                             "' has no closed form; use kl_monte_carlo");
  const double sp = prior.sigma_p;
  double total = 0.0;
  for (int64_t i = 0; i < post.mu.numel(); ++i) {
    const double sig = stable_softplus(post.rho[i]);
    total += std::log(sp / sig) + (sig * sig + post.mu[i] * post.mu[i]) / (2.0 * sp * sp) - 0.5;
  }
  return total;
}

inline double log_prior_density(const Prior& prior, const Tensor& w) {
  double total = 0.0;
  switch (prior.kind) {
    case Prior::Kind::kIsoGaussian: {
      const double sp = prior.sigma_p;
      for (int64_t i = 0; i < w.numel(); ++i) total += w[i] * w[i];
      return -total / (2.0 * sp * sp) -
             (std::log(sp) + 0.5 * std::log(2.0 * M_PI)) * static_cast<double>(w.numel());
    }
    case Prior::Kind::kCauchy: {
      const double k = prior.kappa;
      for (int64_t i = 0; i < w.numel(); ++i) total += std::log1p((w[i] / k) * (w[i] / k));
      return -total - std::log(M_PI * k) * static_cast<double>(w.numel());
    }
    case Prior::Kind::kScaleMixture: {
      for (int64_t i = 0; i < w.numel(); ++i)
        total += log_mixture_density(w[i], prior.sigma0, prior.sigma1, prior.beta);
      return total;
    }
  }
  return total;
}

inline double log_posterior_density(const GaussianPosterior& post, const Tensor& w) {
  double total = 0.0;
  for (int64_t i = 0; i < w.numel(); ++i) {
    const double sig = stable_softplus(post.rho[i]);
    const double z = (w[i] - post.mu[i]) / sig;
    total += -std::log(sig) - 0.5 * z * z;
  }
  return total - 0.5 * std::log(2.0 * M_PI) * static_cast<double>(w.numel());
}

// Single-sample KL estimate log q(phi) - log p(phi); unbiased for any prior.
inline double kl_monte_carlo(const GaussianPosterior& post, const Prior& prior,
                             const WeightSample& sample) {
  return log_posterior_density(post, sample.value) - log_prior_density(prior, sample.value);
}

inline double elbo_loss(double kl_total, double nll, double kl_weight) {
  if (!(kl_weight > 0.0))
    throw std::runtime_error("elbo_loss: kl_weight must be positive, got " + std::to_string(kl_weight));
  return kl_weight * kl_total + nll;
}

// rho giving sigma = 0.01 at init: training starts near a deterministic net.
inline double rho_init() { return std::log(std::expm1(0.01)); }

// He-style posterior init for a weight tensor with the given fan-in.
inline GaussianPosterior init_posterior(Shape shape, int64_t fan_in, Rng& rng) {
  const double sd = std::sqrt(2.0 / static_cast<double>(fan_in));
  GaussianPosterior post;
  post.mu = Tensor(shape);
  for (int64_t i = 0; i < post.mu.numel(); ++i) post.mu[i] = rng.normal(0.0, sd);
  post.rho = Tensor::full(shape, rho_init());
  return post;
}

}  // namespace duet
