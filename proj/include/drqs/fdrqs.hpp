#pragma once

// Factor DRQS for N series: synthesis weights theta_{itj} = lambda_ij' u_tj
// with a multiplicative gamma process prior on the loadings, factor FFBS and
// per-series gamma-beta random walk precisions.
//
// Blocks are indexed j = 0..J where block 0 is the intercept. The factor state
// u_t stacks the blocks: u_t = (u_t0', u_t1', ..., u_tJ')', each of length L.

#include "drqs/agents.hpp"
#include "drqs/dlm.hpp"
#include "drqs/drqs.hpp"
#include "drqs/linalg.hpp"
#include "drqs/stats.hpp"

#include <numbers>

namespace drqs {

struct FdrqsConfig {
  QuantileLevel tau{0.5};
  int series = 2;
  int agents = 1;
  int factors = 1;
  Vector m0;  // L(J+1)
  Matrix C0;
  Vector n0;  // per series
  Vector s0;
  Vector nu;  // per block, J+1
  Vector a1;
  Vector a2;
  double delta = 0.85;
  Vector beta;  // per series
  // When non-empty (J+1 matrices of N x L) the loadings are held fixed and the
  // MGP steps are skipped.
  std::vector<Matrix> fixed_loadings;

  // Note the per-series scale prior (0.001) differs from the univariate
  // default (0.01); both follow the reference settings.
  static FdrqsConfig defaults(QuantileLevel tau, int N, int J, int L = 5) {
    FdrqsConfig c;
    c.tau = tau;
    c.series = N;
    c.agents = J;
    c.factors = L;
    const int p = L * (J + 1);
    c.m0 = Vector::Constant(p, J > 0 ? 1.0 / J : 0.0);
    c.m0.head(L).setZero();
    c.C0 = Matrix::Identity(p, p);
    c.C0.diagonal().head(L).setConstant(1000.0);
    c.n0 = Vector::Constant(N, 0.001);
    c.s0 = Vector::Constant(N, 0.001);
    c.nu = Vector::Constant(J + 1, 3.0);
    c.a1 = Vector::Constant(J + 1, 2.5);
    c.a2 = Vector::Constant(J + 1, 3.5);
    c.delta = 0.85;
    c.beta = Vector::Constant(N, 0.85);
    return c;
  }

  int blocks() const { return agents + 1; }
  int state_dim() const { return factors * blocks(); }

  void validate() const {
    if (series < 1 || agents < 1 || factors < 1) throw ConfigError("FDRQS needs N, J, L >= 1");
    if (fixed_loadings.empty() && factors >= series) throw ConfigError("FDRQS needs L < N unless loadings are fixed");
    if (m0.size() != state_dim() || C0.rows() != state_dim() || C0.cols() != state_dim()) {
      throw ConfigError("FDRQS prior must have L(J+1) entries");
    }
    if (n0.size() != series || s0.size() != series || beta.size() != series) {
      throw ConfigError("FDRQS per-series settings must have N entries");
    }
    if (nu.size() != blocks() || a1.size() != blocks() || a2.size() != blocks()) {
      throw ConfigError("FDRQS MGP settings must have J+1 entries");
    }
    if ((n0.array() <= 0.0).any() || (s0.array() <= 0.0).any()) throw ConfigError("n0, s0 must be positive");
    if ((nu.array() <= 0.0).any() || (a1.array() <= 0.0).any() || (a2.array() <= 0.0).any()) {
      throw ConfigError("MGP hyperparameters must be positive");
    }
    if (!(delta > 0.0 && delta <= 1.0)) throw ConfigError("factor discount must lie in (0,1]");
    if ((beta.array() <= 0.0).any() || (beta.array() > 1.0).any()) throw ConfigError("beta_i must lie in (0,1]");
    if (!fixed_loadings.empty()) {
      if (static_cast<int>(fixed_loadings.size()) != blocks()) throw ConfigError("fixed loadings need J+1 blocks");
      for (const auto& l : fixed_loadings)
        if (l.rows() != series || l.cols() != factors) throw ConfigError("fixed loading block must be N x L");
    }
  }
};

// ---------------------------------------------------------------------------
// Multiplicative gamma process pieces.

/// omega_l = prod_{h <= l} delta_h.
inline Vector cumulative_shrinkage(const Vector& delta) {
  Vector omega(delta.size());
  double acc = 1.0;
  for (Eigen::Index l = 0; l < delta.size(); ++l) {
    acc *= delta(l);
    if (!(acc >= 1e-300)) throw NumericalError("MGP cumulative precision underflow", l);
    omega(l) = acc;
  }
  return omega;
}

inline double sample_local_precision(double nu, double omega, double lambda, Rng& rng) {
  return sample_gamma((nu + 1.0) / 2.0, (omega * lambda * lambda + nu) / 2.0, rng);
}

/// Full-conditional parameters of delta_h (0-based h) given the others.
inline std::pair<double, double> global_shrinkage_conditional(Eigen::Index h, const Vector& delta,
                                                              const Matrix& lambda, const Matrix& phi, double a1,
                                                              double a2) {
  const auto N = static_cast<double>(lambda.rows());
  const auto L = delta.size();
  double rate = 1.0;
  double partial = 1.0;  // prod_{s <= l, s != h} delta_s
  for (Eigen::Index l = 0; l < L; ++l) {
    if (l != h) partial *= delta(l);
    if (l >= h) rate += 0.5 * partial * (phi.col(l).array() * lambda.col(l).array().square()).sum();
  }
  const double shape = N * static_cast<double>(L - h) / 2.0 + (h == 0 ? a1 : a2);
  return {shape, rate};
}

/// Sequential update of delta_1..delta_L; `lambda` and `phi` are N x L.
inline void update_global_shrinkage(Vector& delta, const Matrix& lambda, const Matrix& phi, double a1, double a2,
                                    Rng& rng) {
  for (Eigen::Index h = 0; h < delta.size(); ++h) {
    const auto [shape, rate] = global_shrinkage_conditional(h, delta, lambda, phi, a1, a2);
    delta(h) = sample_gamma(shape, rate, rng);
  }
}

struct MgpPriorDraw {
  Vector delta;
  Vector omega;
};

inline MgpPriorDraw sample_mgp_prior(int L, double a1, double a2, Rng& rng) {
  MgpPriorDraw out{Vector(L), Vector(L)};
  for (int l = 0; l < L; ++l) out.delta(l) = sample_gamma(l == 0 ? a1 : a2, 1.0, rng);
  out.omega = cumulative_shrinkage(out.delta);
  return out;
}

// ---------------------------------------------------------------------------

struct FactorState {
  Matrix u;                      // T x L(J+1) (last row only when paths are not kept)
  std::vector<Matrix> loadings;  // J+1 blocks of N x L
  std::vector<Matrix> local;     // phi_{il j}, J+1 blocks of N x L
  Matrix deltas;                 // (J+1) x L
  Matrix omegas;                 // (J+1) x L
};

/// theta_{.,.,j} as an N x T matrix: Lambda_j u_{.,j}'.
inline Matrix synthesis_weights(const std::vector<Matrix>& loadings, const Matrix& u, int j) {
  const auto L = loadings[static_cast<std::size_t>(j)].cols();
  return loadings[static_cast<std::size_t>(j)] * u.middleCols(j * L, L).transpose();
}

struct FdrqsTerminal {
  Vector u;
  Matrix C;
  Vector sigma;  // per series
  Vector n;
};

struct PanelDraw {
  FactorState factors;
  Matrix v;                    // N x T
  std::vector<Matrix> f;       // J blocks of N x T
  Matrix sigma;                // N x T
  std::vector<Matrix> theta;   // J+1 blocks of N x T, derived from (Lambda, u)
  FdrqsTerminal terminal;
};

struct FdrqsPosterior {
  std::vector<PanelDraw> draws;
  FdrqsConfig config;
};

/// sum_{i,t} log N(y_it; theta_it0 + sum_j f_itj theta_itj + kappa1 v_it, kappa2 sigma_it v_it).
inline double fdrqs_observation_log_density(const Matrix& Y, const std::vector<Matrix>& loadings, const Matrix& u,
                                            const Matrix& v, const std::vector<Matrix>& f, const Matrix& sigma,
                                            const MixtureConstants& k) {
  Matrix fit = synthesis_weights(loadings, u, 0);
  for (std::size_t j = 0; j < f.size(); ++j) {
    fit.array() += f[j].array() * synthesis_weights(loadings, u, static_cast<int>(j + 1)).array();
  }
  const Eigen::ArrayXXd var = k.kappa2 * sigma.array() * v.array();
  const Eigen::ArrayXXd r = Y.array() - fit.array() - k.kappa1 * v.array();
  return (-0.5 * (2.0 * std::numbers::pi * var).log() - 0.5 * r.square() / var).sum();
}

inline FdrqsPosterior gibbs_fdrqs(const Matrix& Y, const std::vector<AgentInputs>& agents, const FdrqsConfig& cfg,
                                  const McmcConfig& mcmc, Rng& rng) {
  cfg.validate();
  mcmc.validate();
  const auto N = Y.rows();
  const auto T = Y.cols();
  const int J = cfg.agents;
  const int L = cfg.factors;
  const int B = cfg.blocks();
  const int p = cfg.state_dim();
  if (N != cfg.series) throw std::invalid_argument("FDRQS: panel rows must equal N");
  if (static_cast<Eigen::Index>(agents.size()) != N) throw std::invalid_argument("FDRQS: need agent inputs per series");
  for (const auto& a : agents) {
    if (a.mean.rows() != T || a.mean.cols() != J || a.var.rows() != T || a.var.cols() != J) {
      throw std::invalid_argument("FDRQS: agent inputs must be T x J for every series");
    }
    if ((a.var.array() <= 0.0).any()) throw std::invalid_argument("FDRQS: agent variances must be positive");
  }
  if (!Y.allFinite()) throw std::invalid_argument("FDRQS: panel must be gap-free");
  const auto k = mixture_constants(cfg.tau);
  const bool sample_loadings = cfg.fixed_loadings.empty();

  FactorState st;
  st.u = cfg.m0.transpose().replicate(T, 1);
  if (sample_loadings) {
    st.loadings.assign(B, Matrix::Zero(N, L));
    for (auto& l : st.loadings) l.col(0).setOnes();
  } else {
    st.loadings = cfg.fixed_loadings;
  }
  st.local.assign(B, Matrix::Ones(N, L));
  st.deltas = Matrix::Ones(B, L);
  st.omegas = Matrix::Ones(B, L);

  Matrix v = Matrix::Ones(N, T);
  Matrix sigma = Matrix::Ones(N, T);
  std::vector<Matrix> f(J, Matrix(N, T));
  for (int j = 0; j < J; ++j)
    for (Eigen::Index i = 0; i < N; ++i) f[j].row(i) = agents[i].mean.col(j).transpose();

  KnownVarianceModel model;
  model.y.assign(T, Vector(N));
  model.design.assign(T, Matrix::Zero(N, p));
  model.offset.assign(T, Vector(N));
  model.obs_var.assign(T, Vector(N));
  for (Eigen::Index t = 0; t < T; ++t) model.y[t] = Y.col(t);
  const GaussianPrior prior{cfg.m0, cfg.C0};

  FdrqsPosterior post;
  post.config = cfg;
  post.draws.reserve(static_cast<std::size_t>(mcmc.draws));
  const int total = mcmc.burnin + mcmc.draws;
  std::vector<Matrix> theta(B);
  Vector weights(J);
  Vector a_it(J), A_it(J);

  for (int it = 0; it < total; ++it) {
    try {
      // (1) mixing variables and latent predictors, per series
      for (int j = 0; j < B; ++j) theta[j] = synthesis_weights(st.loadings, st.u, j);
      for (Eigen::Index i = 0; i < N; ++i) {
        for (Eigen::Index t = 0; t < T; ++t) {
          double fit = theta[0](i, t);
          for (int j = 0; j < J; ++j) fit += f[j](i, t) * theta[j + 1](i, t);
          v(i, t) = sample_mixing_variable(Y(i, t) - fit, sigma(i, t), k, rng);
          for (int j = 0; j < J; ++j) {
            weights(j) = theta[j + 1](i, t);
            a_it(j) = agents[i].mean(t, j);
            A_it(j) = agents[i].var(t, j);
          }
          const Vector fi = sample_latent_predictors(Y(i, t), theta[0](i, t), weights, sigma(i, t), v(i, t), a_it,
                                                     A_it, k, rng);
          for (int j = 0; j < J; ++j) f[j](i, t) = fi(j);
        }
      }

      if (sample_loadings) {
        // (2) loadings, one series at a time
        for (Eigen::Index i = 0; i < N; ++i) {
          Matrix precision = Matrix::Zero(p, p);
          Vector b = Vector::Zero(p);
          Vector ut(p);
          for (Eigen::Index t = 0; t < T; ++t) {
            ut.head(L) = st.u.row(t).head(L).transpose();
            for (int j = 0; j < J; ++j) ut.segment((j + 1) * L, L) = f[j](i, t) * st.u.row(t).segment((j + 1) * L, L).transpose();
            const double w = 1.0 / (k.kappa2 * sigma(i, t) * v(i, t));
            precision.selfadjointView<Eigen::Lower>().rankUpdate(ut, w);
            b += ut * (w * (Y(i, t) - k.kappa1 * v(i, t)));
          }
          precision = precision.selfadjointView<Eigen::Lower>();
          for (int j = 0; j < B; ++j)
            for (int l = 0; l < L; ++l) precision(j * L + l, j * L + l) += st.local[j](i, l) * st.omegas(j, l);
          const Vector lam = sample_mvn_canonical(b, precision, rng, static_cast<long>(i));
          for (int j = 0; j < B; ++j) st.loadings[j].row(i) = lam.segment(j * L, L).transpose();
        }
        // (3) local precisions, (4) global shrinkage
        for (int j = 0; j < B; ++j) {
          for (Eigen::Index i = 0; i < N; ++i)
            for (int l = 0; l < L; ++l)
              st.local[j](i, l) = sample_local_precision(cfg.nu(j), st.omegas(j, l), st.loadings[j](i, l), rng);
          Vector d = st.deltas.row(j).transpose();
          update_global_shrinkage(d, st.loadings[j], st.local[j], cfg.a1(j), cfg.a2(j), rng);
          st.deltas.row(j) = d.transpose();
          st.omegas.row(j) = cumulative_shrinkage(d).transpose();
        }
      }

      // (5) factor path
      for (Eigen::Index t = 0; t < T; ++t) {
        Matrix& D = model.design[t];
        for (int j = 0; j < B; ++j) {
          if (j == 0) {
            D.middleCols(0, L) = st.loadings[0];
          } else {
            D.middleCols(j * L, L) = f[j - 1].col(t).asDiagonal() * st.loadings[j];
          }
        }
        model.offset[t] = k.kappa1 * v.col(t);
        model.obs_var[t] = k.kappa2 * sigma.col(t).cwiseProduct(v.col(t));
      }
      auto traj = ffbs_known_variance(model, prior, cfg.delta, rng);
      st.u = std::move(traj.states);

      // (6) per-series precision paths
      Vector n_T(N);
      for (Eigen::Index i = 0; i < N; ++i) {
        Vector sq(T);
        for (Eigen::Index t = 0; t < T; ++t) {
          const double ftil = model.design[t].row(i).dot(st.u.row(t));
          const double r = Y(i, t) - ftil - k.kappa1 * v(i, t);
          sq(t) = r * r;
        }
        const auto path = gbrw_filter_sample(sq, v.row(i).transpose(), k.kappa2, cfg.n0(i), cfg.n0(i) * cfg.s0(i),
                                             cfg.beta(i), rng);
        sigma.row(i) = path.phi.cwiseInverse().transpose();
        n_T(i) = path.n_T;
      }
      if (!sigma.allFinite() || !st.u.allFinite()) throw NumericalError("non-finite sweep state");

      if (it >= mcmc.burnin) {
        PanelDraw d;
        d.factors = st;
        if (mcmc.keep_paths) {
          d.v = v;
          d.f = f;
          d.sigma = sigma;
          for (int j = 0; j < B; ++j) d.theta.push_back(synthesis_weights(st.loadings, st.u, j));
        } else {
          d.factors.u = st.u.bottomRows(1);
        }
        d.terminal = {st.u.row(T - 1).transpose(), traj.C_T, sigma.col(T - 1), n_T};
        post.draws.push_back(std::move(d));
      }
    } catch (const NumericalError& e) {
      throw NumericalError(std::string("FDRQS sampler failed: ") + e.what(), it);
    }
  }
  return post;
}

struct FdrqsForecast {
  std::vector<QuantileForecast> series;  // one per series
  Matrix joint;                          // draws x N, rows aligned across series
  Matrix sigma_next;                     // draws x N evolved scales
};

/// `a_next`, `A_next` are N x J agent moments for time T+1.
inline FdrqsForecast forecast_fdrqs(const FdrqsPosterior& post, const Matrix& a_next, const Matrix& A_next, Rng& rng,
                                    std::int64_t time = 0) {
  const auto& cfg = post.config;
  const int N = cfg.series;
  const int J = cfg.agents;
  const int L = cfg.factors;
  if (a_next.rows() != N || a_next.cols() != J || A_next.rows() != N || A_next.cols() != J) {
    throw std::invalid_argument("FDRQS forecast: missing agent forecast for some (series, agent)");
  }
  if (!a_next.allFinite() || !(A_next.array() > 0.0).all()) {
    throw std::invalid_argument("FDRQS forecast: agent forecasts must be finite with positive variance");
  }
  if (post.draws.empty()) throw std::invalid_argument("FDRQS forecast: no posterior draws");
  const auto D = static_cast<Eigen::Index>(post.draws.size());
  const double inflate = (1.0 - cfg.delta) / cfg.delta;

  FdrqsForecast out;
  out.joint.resize(D, N);
  out.sigma_next.resize(D, N);
  for (Eigen::Index d = 0; d < D; ++d) {
    const auto& draw = post.draws[static_cast<std::size_t>(d)];
    const auto& term = draw.terminal;
    Vector u = term.u;
    if (cfg.delta < 1.0) u = sample_mvn(term.u, covariance_root(term.C) * std::sqrt(inflate), rng);
    for (int i = 0; i < N; ++i) out.sigma_next(d, i) = evolve_scale(term.sigma(i), term.n(i), cfg.beta(i), rng);
    for (int i = 0; i < N; ++i) {
      double q = draw.factors.loadings[0].row(i).dot(u.head(L));
      for (int j = 0; j < J; ++j) {
        const double fij = a_next(i, j) + std::sqrt(A_next(i, j)) * sample_std_normal(rng);
        q += fij * draw.factors.loadings[j + 1].row(i).dot(u.segment((j + 1) * L, L));
      }
      out.joint(d, i) = q;
    }
  }
  for (int i = 0; i < N; ++i) {
    std::vector<double> col(out.joint.col(i).data(), out.joint.col(i).data() + D);
    out.series.push_back(summarize_forecast(std::move(col), time, cfg.tau.value()));
  }
  return out;
}

}  // namespace drqs
