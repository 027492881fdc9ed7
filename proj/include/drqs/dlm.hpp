#pragma once

// Discount-factor dynamic linear model machinery: conjugate (normal-gamma)
// FFBS, known-variance FFBS and the gamma-beta random walk for precisions.
// Gamma laws are parameterized by (shape, rate) throughout.

#include "drqs/core.hpp"
#include "drqs/linalg.hpp"
#include "drqs/stats.hpp"

#include <numbers>
#include <vector>

namespace drqs {

struct DiscountConfig {
  double delta = 1.0;  // state covariance discount
  double beta = 1.0;   // scale discount

  void validate() const {
    if (!(delta > 0.0 && delta <= 1.0)) throw ConfigError("state discount must lie in (0,1]");
    if (!(beta > 0.0 && beta <= 1.0)) throw ConfigError("scale discount must lie in (0,1]");
  }
};

/// theta_0 | phi_0 ~ N(m0, C0 / (phi_0 s0)),  phi_0 ~ Ga(n0/2, n0 s0/2).
struct NormalGammaPrior {
  Vector m0;
  Matrix C0;
  double n0 = 1.0;
  double s0 = 1.0;

  void validate() const {
    if (C0.rows() != m0.size() || C0.cols() != m0.size()) throw ConfigError("prior C0 must be square and match m0");
    if (!(n0 > 0.0) || !(s0 > 0.0)) throw ConfigError("prior n0 and s0 must be positive");
    if (min_eigenvalue(C0) < -1e-12 * std::abs(C0.trace())) throw ConfigError("prior C0 must be PSD");
  }
};

struct GaussianPrior {
  Vector m0;
  Matrix C0;
};

// ---------------------------------------------------------------------------
// Conjugate chain: y_t = F_t' theta_t + kappa1 v_t + e_t, e_t ~ N(0, sigma_t kappa2 v_t)

struct ConjugateFilterState {
  Vector m;
  Matrix C;  // scale-free: Cov(theta_t | phi_t) = C / (phi_t s)
  double n;
  double s;
};

struct ConjugateTrajectory {
  Matrix theta;  // T x p
  Vector phi;    // precisions 1/sigma_t
  ConjugateFilterState terminal;
};

/// Forward pass of the conjugate chain. `design` is T x p with row t = F_t'.
inline std::vector<ConjugateFilterState> conjugate_forward_filter(const Vector& y, const Matrix& design,
                                                                  const Vector& v, const MixtureConstants& k,
                                                                  const NormalGammaPrior& prior,
                                                                  const DiscountConfig& disc) {
  const auto T = y.size();
  if (design.rows() != T || v.size() != T) throw std::invalid_argument("conjugate filter: length mismatch");
  if (design.cols() != prior.m0.size()) throw std::invalid_argument("conjugate filter: design width != state dim");

  std::vector<ConjugateFilterState> out;
  out.reserve(static_cast<std::size_t>(T));
  Vector m = prior.m0;
  Matrix C = prior.C0;
  double n = prior.n0;
  double s = prior.s0;
  for (Eigen::Index t = 0; t < T; ++t) {
    if (!(v(t) > 0.0)) throw NumericalError("mixing variable must be positive", t);
    const Vector F = design.row(t).transpose();
    const Matrix R = C / disc.delta;
    const Vector RF = R * F;
    const double f = F.dot(m);
    const double Q = F.dot(RF) + s * k.kappa2 * v(t);
    if (!std::isfinite(Q) || !(Q > 0.0)) throw NumericalError("non-finite one-step variance Q_t", t);
    const double e = y(t) - f - k.kappa1 * v(t);
    const double n_next = disc.beta * n + 3.0;
    const double r = (disc.beta * n + e * e / Q + 2.0 * v(t) / s) / n_next;
    const Vector A = RF / Q;
    m += A * e;
    C = symmetrize(r * (R - Q * A * A.transpose()));
    covariance_root(C, t);  // PSD check
    s *= r;
    n = n_next;
    if (!std::isfinite(s) || !(s > 0.0)) throw NumericalError("non-finite scale estimate", t);
    out.push_back({m, C, n, s});
  }
  return out;
}

/// Joint draw of (theta_{1:T}, phi_{1:T}) given y, the design and the mixing variables.
inline ConjugateTrajectory ffbs_conjugate(const Vector& y, const Matrix& design, const Vector& v,
                                          const MixtureConstants& k, const NormalGammaPrior& prior,
                                          const DiscountConfig& disc, Rng& rng) {
  const auto filt = conjugate_forward_filter(y, design, v, k, prior, disc);
  const auto T = static_cast<Eigen::Index>(filt.size());
  const auto p = design.cols();
  ConjugateTrajectory out;
  out.theta.resize(T, p);
  out.phi.resize(T);
  if (T == 0) {
    out.terminal = {prior.m0, prior.C0, prior.n0, prior.s0};
    return out;
  }

  const auto& last = filt.back();
  double phi = sample_gamma(last.n / 2.0, last.n * last.s / 2.0, rng);
  Vector theta = sample_mvn(last.m, covariance_root(last.C, T - 1) / std::sqrt(phi * last.s), rng);
  out.phi(T - 1) = phi;
  out.theta.row(T - 1) = theta.transpose();

  for (Eigen::Index t = T - 2; t >= 0; --t) {
    const auto& st = filt[static_cast<std::size_t>(t)];
    const double eta = sample_gamma((1.0 - disc.beta) * st.n / 2.0, st.n * st.s / 2.0, rng);
    phi = disc.beta * phi + eta;
    const Vector mean = st.m + disc.delta * (theta - st.m);
    if (disc.delta < 1.0) {
      const double scale = std::sqrt((1.0 - disc.delta) / (phi * st.s));
      theta = sample_mvn(mean, covariance_root(st.C, t) * scale, rng);
    } else {
      theta = mean;
    }
    out.phi(t) = phi;
    out.theta.row(t) = theta.transpose();
  }
  out.terminal = last;
  return out;
}

// ---------------------------------------------------------------------------
// Known-variance chain: y_t = offset_t + design_t u_t + e_t, e_t ~ N(0, diag(obs_var_t))

struct KnownVarianceModel {
  std::vector<Vector> y;
  std::vector<Matrix> design;   // N x p each
  std::vector<Vector> offset;
  std::vector<Vector> obs_var;  // diagonal of Sigma_t
};

struct GaussianFilterState {
  Vector m;
  Matrix C;
  double log_predictive;  // log N(y_t; f_t, Q_t)
};

struct KnownVarianceTrajectory {
  Matrix states;  // T x p
  Vector m_T;
  Matrix C_T;
  double log_likelihood = 0.0;
};

inline std::vector<GaussianFilterState> known_variance_forward_filter(const KnownVarianceModel& model,
                                                                      const GaussianPrior& prior, double delta) {
  const auto T = model.y.size();
  if (model.design.size() != T || model.offset.size() != T || model.obs_var.size() != T) {
    throw std::invalid_argument("known-variance filter: length mismatch");
  }
  std::vector<GaussianFilterState> out;
  out.reserve(T);
  Vector m = prior.m0;
  Matrix C = prior.C0;
  for (std::size_t t = 0; t < T; ++t) {
    const auto idx = static_cast<long>(t);
    const Matrix& Ft = model.design[t];
    if (Ft.cols() != m.size() || Ft.rows() != model.y[t].size()) throw std::invalid_argument("design shape mismatch");
    if ((model.obs_var[t].array() <= 0.0).any()) throw NumericalError("observation variance must be positive", idx);
    const Matrix R = C / delta;
    const Matrix FR = Ft * R;
    Matrix Q = FR * Ft.transpose();
    Q.diagonal() += model.obs_var[t];
    Q = symmetrize(Q);
    Eigen::LLT<Matrix> llt(Q);
    if (llt.info() != Eigen::Success || !Q.allFinite()) {
      std::ostringstream msg;
      msg << "singular one-step covariance Q_t (min eigenvalue " << (Q.allFinite() ? min_eigenvalue(Q) : NAN) << ")";
      throw NumericalError(msg.str(), idx);
    }
    const Vector e = model.y[t] - model.offset[t] - Ft * m;
    const Matrix QinvFR = llt.solve(FR);  // Q^{-1} F R, so the gain is A = (Q^{-1} F R)'
    m += QinvFR.transpose() * e;
    C = symmetrize(R - FR.transpose() * QinvFR);
    covariance_root(C, idx);

    const Vector Linv_e = llt.matrixL().solve(e);
    const double logdet = 2.0 * llt.matrixLLT().diagonal().array().log().sum();
    const double n = static_cast<double>(e.size());
    const double lp = -0.5 * (n * std::log(2.0 * std::numbers::pi) + logdet + Linv_e.squaredNorm());
    out.push_back({m, C, lp});
  }
  return out;
}

inline KnownVarianceTrajectory ffbs_known_variance(const KnownVarianceModel& model, const GaussianPrior& prior,
                                                   double delta, Rng& rng) {
  if (!(delta > 0.0 && delta <= 1.0)) throw ConfigError("state discount must lie in (0,1]");
  const auto filt = known_variance_forward_filter(model, prior, delta);
  const auto T = static_cast<Eigen::Index>(filt.size());
  KnownVarianceTrajectory out;
  out.states.resize(T, prior.m0.size());
  if (T == 0) {
    out.m_T = prior.m0;
    out.C_T = prior.C0;
    return out;
  }
  for (const auto& st : filt) out.log_likelihood += st.log_predictive;
  Vector u = sample_mvn(filt.back().m, covariance_root(filt.back().C, T - 1), rng);
  out.states.row(T - 1) = u.transpose();
  for (Eigen::Index t = T - 2; t >= 0; --t) {
    const auto& st = filt[static_cast<std::size_t>(t)];
    const Vector mean = st.m + delta * (u - st.m);
    u = delta < 1.0 ? sample_mvn(mean, covariance_root(st.C, t) * std::sqrt(1.0 - delta), rng) : mean;
    out.states.row(t) = u.transpose();
  }
  out.m_T = filt.back().m;
  out.C_T = filt.back().C;
  return out;
}

// ---------------------------------------------------------------------------
// Gamma-beta random walk for a per-series precision path.

struct GbrwFilter {
  Vector n;  // n_t
  Vector d;  // d_t; phi_t | data ~ Ga(n_t/2, d_t/2)
};

struct GbrwPath {
  Vector phi;
  double n_T;
  double d_T;
};

/// d_t = beta d_{t-1} + sq_resid_t / (kappa2 v_t) + 2 v_t,  n_t = beta n_{t-1} + 3.
inline GbrwFilter gbrw_forward(const Vector& sq_resid, const Vector& v, double kappa2, double n0, double d0,
                               double beta) {
  if (sq_resid.size() != v.size()) throw std::invalid_argument("gbrw: length mismatch");
  if (!(n0 > 0.0) || !(d0 > 0.0)) throw std::invalid_argument("gbrw: n0 and d0 must be positive");
  const auto T = v.size();
  GbrwFilter out{Vector(T), Vector(T)};
  double n = n0;
  double d = d0;
  for (Eigen::Index t = 0; t < T; ++t) {
    if (!(v(t) > 0.0)) throw std::invalid_argument("gbrw: mixing variable must be positive");
    if (!(sq_resid(t) >= 0.0) || !std::isfinite(sq_resid(t))) throw NumericalError("gbrw: bad residual", t);
    n = beta * n + 3.0;
    d = beta * d + sq_resid(t) / (kappa2 * v(t)) + 2.0 * v(t);
    out.n(t) = n;
    out.d(t) = d;
  }
  return out;
}

inline GbrwPath gbrw_filter_sample(const Vector& sq_resid, const Vector& v, double kappa2, double n0, double d0,
                                   double beta, Rng& rng) {
  if (!(beta > 0.0 && beta <= 1.0)) throw ConfigError("scale discount must lie in (0,1]");
  const auto filt = gbrw_forward(sq_resid, v, kappa2, n0, d0, beta);
  const auto T = v.size();
  GbrwPath out{Vector(T), n0, d0};
  if (T == 0) return out;
  double phi = sample_gamma(filt.n(T - 1) / 2.0, filt.d(T - 1) / 2.0, rng);
  out.phi(T - 1) = phi;
  for (Eigen::Index t = T - 2; t >= 0; --t) {
    phi = beta * phi + sample_gamma((1.0 - beta) * filt.n(t) / 2.0, filt.d(t) / 2.0, rng);
    out.phi(t) = phi;
  }
  out.n_T = filt.n(T - 1);
  out.d_T = filt.d(T - 1);
  return out;
}

/// One-step evolution sigma_{T+1} = (beta / gamma) sigma_T with
/// gamma ~ Beta(beta n_T / 2, (1 - beta) n_T / 2). beta == 1 keeps sigma fixed.
inline double evolve_scale(double sigma, double n_T, double beta, Rng& rng) {
  if (beta == 1.0) return sigma;
  const double gamma = sample_beta(beta * n_T / 2.0, (1.0 - beta) * n_T / 2.0, rng);
  return beta / gamma * sigma;
}

}  // namespace drqs
