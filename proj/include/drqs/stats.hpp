#pragma once

// Asymmetric Laplace kernels, the location-scale mixture constants and the
// random variate generators shared by every sampler in the library.

#include "drqs/core.hpp"

#include <algorithm>
#include <cmath>
#include <numbers>

namespace drqs {

struct ALParams {
  QuantileLevel tau;
  double sigma;
};

struct MixtureConstants {
  double kappa1;
  double kappa2;
};

// Floor applied to squared residuals and mixing variables before division.
inline constexpr double kMixingFloor = 1e-12;

/// Quantile check loss u * (tau - 1{u < 0}).
inline double check_loss(double u, QuantileLevel tau) {
  return u * (tau.value() - (u < 0.0 ? 1.0 : 0.0));
}

inline double al_log_density(double eps, const ALParams& p) {
  if (!(p.sigma > 0.0)) throw std::invalid_argument("asymmetric Laplace scale must be positive");
  const double t = p.tau.value();
  return std::log(t * (1.0 - t) / p.sigma) - check_loss(eps / p.sigma, p.tau);
}

// Closed-form distribution function of AL(tau, sigma).
inline double al_cdf(double eps, const ALParams& p) {
  if (!(p.sigma > 0.0)) throw std::invalid_argument("asymmetric Laplace scale must be positive");
  const double t = p.tau.value();
  if (eps < 0.0) return t * std::exp((1.0 - t) * eps / p.sigma);
  return 1.0 - (1.0 - t) * std::exp(-t * eps / p.sigma);
}

inline MixtureConstants mixture_constants(QuantileLevel tau) {
  const double t = tau.value();
  const double denom = t * (1.0 - t);
  return {(1.0 - 2.0 * t) / denom, 2.0 / denom};
}

inline double sample_std_normal(Rng& rng) {
  std::normal_distribution<double> n(0.0, 1.0);
  return n(rng);
}

// Gamma with (shape, rate). Shape zero is the point mass at zero, which is the
// limit used by discount-one evolutions.
inline double sample_gamma(double shape, double rate, Rng& rng) {
  if (!(rate > 0.0) || !std::isfinite(rate)) throw NumericalError("gamma rate must be positive and finite");
  if (shape < 0.0 || !std::isfinite(shape)) throw NumericalError("gamma shape must be nonnegative and finite");
  if (shape == 0.0) return 0.0;
  std::gamma_distribution<double> g(shape, 1.0 / rate);
  return g(rng);
}

// Beta(a, b); b == 0 is the point mass at one.
inline double sample_beta(double a, double b, Rng& rng) {
  if (!(a > 0.0)) throw NumericalError("beta first shape must be positive");
  if (b == 0.0) return 1.0;
  const double x = sample_gamma(a, 1.0, rng);
  const double y = sample_gamma(b, 1.0, rng);
  return x / (x + y);
}

// The mixing variable of the AL representation is exponential with MEAN sigma.
inline double sample_exponential_mean(double mean, Rng& rng) {
  std::exponential_distribution<double> e(1.0 / mean);
  return e(rng);
}

/// Inverse Gaussian with mean `mu` and shape `lambda` (Michael, Schucany and Haas).
inline double sample_inverse_gaussian(double mu, double lambda, Rng& rng) {
  const double z = sample_std_normal(rng);
  const double w = mu * z * z / (2.0 * lambda);
  // mu * (1 + w - sqrt(w^2 + 2w)) written without cancellation.
  const double root = mu / (1.0 + w + std::sqrt(w * w + 2.0 * w));
  std::uniform_real_distribution<double> unif(0.0, 1.0);
  return unif(rng) <= mu / (mu + root) ? root : mu * mu / root;
}

/// Draw from GIG(1/2, chi, psi), density proportional to
/// x^{-1/2} exp{-(chi/x + psi x)/2}.
///
/// 1/X is GIG(-1/2, psi, chi), i.e. inverse Gaussian with mean sqrt(psi/chi)
/// and shape psi. chi == 0 is the Gamma(1/2, psi/2) limit.
inline double sample_gig_half(double chi, double psi, Rng& rng) {
  if (!(psi > 0.0) || !std::isfinite(psi)) throw std::invalid_argument("GIG psi must be positive");
  if (chi < 0.0 || !std::isfinite(chi)) throw std::invalid_argument("GIG chi must be nonnegative");
  if (chi == 0.0) return sample_gamma(0.5, psi / 2.0, rng);
  const double mu = std::sqrt(psi / chi);
  if (!std::isfinite(mu)) return sample_gamma(0.5, psi / 2.0, rng);
  return 1.0 / sample_inverse_gaussian(mu, psi, rng);
}

// Full conditional of the AL mixing variable given the residual
// y - F'theta and the scale sigma.
inline double sample_mixing_variable(double residual, double sigma, const MixtureConstants& k, Rng& rng) {
  const double chi = std::max(residual * residual, kMixingFloor) / (sigma * k.kappa2);
  const double psi = 2.0 / sigma + k.kappa1 * k.kappa1 / (sigma * k.kappa2);
  return std::max(sample_gig_half(chi, psi, rng), kMixingFloor);
}

// Draw AL(tau, sigma) noise through the normal/exponential mixture.
inline double sample_al(QuantileLevel tau, double sigma, Rng& rng) {
  const auto k = mixture_constants(tau);
  const double v = sample_exponential_mean(sigma, rng);
  return k.kappa1 * v + std::sqrt(sigma * k.kappa2 * v) * sample_std_normal(rng);
}

}  // namespace drqs
