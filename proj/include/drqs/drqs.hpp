#pragma once

// Univariate dynamic regression quantile synthesis: the Gibbs sampler over
// (v, f, theta, sigma) and the one-step-ahead quantile forecaster.

#include "drqs/agents.hpp"
#include "drqs/dlm.hpp"
#include "drqs/linalg.hpp"
#include "drqs/stats.hpp"

#include <algorithm>

namespace drqs {

struct DrqsConfig {
  QuantileLevel tau{0.5};
  int agents = 1;
  NormalGammaPrior prior;
  DiscountConfig discount{0.9, 0.9};

  // m0 = (0, 1/J, ..., 1/J), C0 = diag(1000, 1, ..., 1), n0 = s0 = 0.01, delta = beta = 0.9.
  static DrqsConfig defaults(QuantileLevel tau, int J) {
    if (J < 1) throw ConfigError("DRQS needs at least one agent");
    DrqsConfig c;
    c.tau = tau;
    c.agents = J;
    c.prior.m0 = Vector::Constant(J + 1, 1.0 / J);
    c.prior.m0(0) = 0.0;
    c.prior.C0 = Matrix::Identity(J + 1, J + 1);
    c.prior.C0(0, 0) = 1000.0;
    c.prior.n0 = 0.01;
    c.prior.s0 = 0.01;
    return c;
  }

  void validate() const {
    if (agents < 1) throw ConfigError("DRQS needs at least one agent");
    if (prior.m0.size() != agents + 1) throw ConfigError("DRQS prior must have J+1 entries");
    prior.validate();
    discount.validate();
  }
};

// State carried into the one-step-ahead forecast.
struct DrqsTerminal {
  Vector theta;
  double sigma;
  Matrix C;  // scale-free filtered covariance
  double n;
  double s;
};

struct SynthesisDraw {
  Matrix theta;  // T x (J+1), weights including the intercept
  Vector sigma;
  Vector v;
  Matrix f;  // T x J latent predictors
  DrqsTerminal terminal;
};

struct DrqsPosterior {
  std::vector<SynthesisDraw> draws;
  DrqsConfig config;
};

struct QuantileForecast {
  std::int64_t time = 0;
  double tau = 0.5;
  std::vector<double> draws;
  double point = 0.0;
  double lo = 0.0;
  double hi = 0.0;
};

// Linear-interpolation empirical quantile of sorted data.
inline double empirical_quantile_sorted(const std::vector<double>& sorted, double p) {
  if (sorted.empty()) throw std::invalid_argument("empirical quantile of empty sample");
  const double h = p * static_cast<double>(sorted.size() - 1);
  const auto lo = static_cast<std::size_t>(std::floor(h));
  const auto hi = std::min(lo + 1, sorted.size() - 1);
  return sorted[lo] + (h - static_cast<double>(lo)) * (sorted[hi] - sorted[lo]);
}

inline QuantileForecast summarize_forecast(std::vector<double> draws, std::int64_t time, double tau) {
  QuantileForecast out;
  out.time = time;
  out.tau = tau;
  double sum = 0.0;
  for (double d : draws) sum += d;
  out.point = sum / static_cast<double>(draws.size());
  std::vector<double> sorted = draws;
  std::sort(sorted.begin(), sorted.end());
  out.lo = empirical_quantile_sorted(sorted, 0.025);
  out.hi = empirical_quantile_sorted(sorted, 0.975);
  out.draws = std::move(draws);
  return out;
}

struct LatentPredictorConditional {
  Vector mean;
  Matrix cov;
};

/// Gaussian full conditional of f_t given the weights (theta_t0, theta_t+),
/// the mixing variable, the scale and the agent moments (a_t, diag A_t).
inline LatentPredictorConditional latent_predictor_conditional(double y, double intercept, const Vector& weights,
                                                               double sigma, double v, const Vector& a,
                                                               const Vector& A, const MixtureConstants& k) {
  // Zero weights leave f_t unconstrained by y_t; the agent prior is returned as is.
  if ((weights.array() == 0.0).all()) return {a, Matrix(A.asDiagonal())};
  const double obs_var = sigma * k.kappa2 * v;
  Matrix precision = weights * weights.transpose() / obs_var;
  precision.diagonal() += A.cwiseInverse();
  const Vector b = weights * (y - intercept - k.kappa1 * v) / obs_var + a.cwiseQuotient(A);
  Eigen::LLT<Matrix> llt(precision);
  if (llt.info() != Eigen::Success) throw NumericalError("latent predictor precision not positive definite");
  LatentPredictorConditional out;
  out.cov = llt.solve(Matrix::Identity(a.size(), a.size()));
  out.mean = out.cov * b;
  return out;
}

inline Vector sample_latent_predictors(double y, double intercept, const Vector& weights, double sigma, double v,
                                       const Vector& a, const Vector& A, const MixtureConstants& k, Rng& rng) {
  if ((weights.array() == 0.0).all()) return a + A.cwiseSqrt().cwiseProduct(std_normal_vector(a.size(), rng));
  const double obs_var = sigma * k.kappa2 * v;
  Matrix precision = weights * weights.transpose() / obs_var;
  precision.diagonal() += A.cwiseInverse();
  const Vector b = weights * (y - intercept - k.kappa1 * v) / obs_var + a.cwiseQuotient(A);
  return sample_mvn_canonical(b, precision, rng);
}

inline DrqsPosterior gibbs_drqs(const Vector& y, const AgentInputs& agents, const DrqsConfig& cfg,
                                const McmcConfig& mcmc, Rng& rng) {
  cfg.validate();
  mcmc.validate();
  const auto T = y.size();
  const auto J = static_cast<Eigen::Index>(cfg.agents);
  if (agents.mean.rows() != T || agents.var.rows() != T || agents.mean.cols() != J || agents.var.cols() != J) {
    throw std::invalid_argument("DRQS: agent inputs must be T x J");
  }
  if ((agents.var.array() <= 0.0).any()) throw std::invalid_argument("DRQS: agent variances must be positive");
  if (!y.allFinite() || !agents.mean.allFinite() || !agents.var.allFinite()) {
    throw std::invalid_argument("DRQS: non-finite inputs");
  }
  const auto k = mixture_constants(cfg.tau);

  Matrix theta = cfg.prior.m0.transpose().replicate(T, 1);
  Vector sigma = Vector::Ones(T);
  Vector v = Vector::Ones(T);
  Matrix f = agents.mean;
  Matrix design(T, J + 1);
  design.col(0).setOnes();

  DrqsPosterior post;
  post.config = cfg;
  post.draws.reserve(static_cast<std::size_t>(mcmc.draws));
  const int total = mcmc.burnin + mcmc.draws;
  for (int it = 0; it < total; ++it) {
    try {
      for (Eigen::Index t = 0; t < T; ++t) {
        const double fit = theta(t, 0) + f.row(t).dot(theta.row(t).tail(J));
        v(t) = sample_mixing_variable(y(t) - fit, sigma(t), k, rng);
      }
      for (Eigen::Index t = 0; t < T; ++t) {
        f.row(t) = sample_latent_predictors(y(t), theta(t, 0), theta.row(t).tail(J).transpose(), sigma(t), v(t),
                                            agents.mean.row(t).transpose(), agents.var.row(t).transpose(), k, rng)
                       .transpose();
      }
      design.rightCols(J) = f;
      auto traj = ffbs_conjugate(y, design, v, k, cfg.prior, cfg.discount, rng);
      theta = std::move(traj.theta);
      sigma = traj.phi.cwiseInverse();
      if (!theta.allFinite() || !sigma.allFinite()) throw NumericalError("non-finite sweep state");

      if (it >= mcmc.burnin) {
        SynthesisDraw d;
        if (mcmc.keep_paths) {
          d.theta = theta;
          d.sigma = sigma;
          d.v = v;
          d.f = f;
        }
        d.terminal = {theta.row(T - 1).transpose(), sigma(T - 1), traj.terminal.C, traj.terminal.n,
                      traj.terminal.s};
        post.draws.push_back(std::move(d));
      }
    } catch (const NumericalError& e) {
      throw NumericalError(std::string("DRQS sampler failed: ") + e.what(), it);
    }
  }
  return post;
}

/// Posterior predictive draws of Q_{T+1}(tau): evolve (sigma, theta) from each
/// retained draw, draw fresh agent predictors, emit F_{T+1}' theta_{T+1}.
inline QuantileForecast forecast_drqs(const DrqsPosterior& post, const Vector& a_next, const Vector& A_next, Rng& rng,
                                      std::int64_t time = 0) {
  const auto& cfg = post.config;
  const auto J = static_cast<Eigen::Index>(cfg.agents);
  if (a_next.size() != J || A_next.size() != J) throw std::invalid_argument("DRQS forecast: need J agent forecasts");
  if ((A_next.array() <= 0.0).any()) throw std::invalid_argument("DRQS forecast: agent variances must be positive");
  if (post.draws.empty()) throw std::invalid_argument("DRQS forecast: no posterior draws");
  const double delta = cfg.discount.delta;
  const double beta = cfg.discount.beta;

  std::vector<double> q;
  q.reserve(post.draws.size());
  for (const auto& d : post.draws) {
    const auto& term = d.terminal;
    const double sigma_next = evolve_scale(term.sigma, term.n, beta, rng);
    Vector theta_next = term.theta;
    if (delta < 1.0) {
      // Cov(w) = sigma_{T+1} W_{T+1}, W_{T+1} = C_T (1 - delta) / (delta s_T).
      const double scale = std::sqrt(sigma_next * (1.0 - delta) / (delta * term.s));
      theta_next = sample_mvn(term.theta, covariance_root(term.C) * scale, rng);
    }
    double value = theta_next(0);
    for (Eigen::Index j = 0; j < J; ++j) {
      const double fj = a_next(j) + std::sqrt(A_next(j)) * sample_std_normal(rng);
      value += theta_next(j + 1) * fj;
    }
    q.push_back(value);
  }
  return summarize_forecast(std::move(q), time, cfg.tau.value());
}

}  // namespace drqs
