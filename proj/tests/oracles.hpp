#pragma once

// Independent reference computations used by the unit and acceptance suites:
// quadrature, dense Gaussian conditioning, closed-form conjugate updates and
// goodness-of-fit statistics. Nothing here calls into the filters or samplers.

#include <Eigen/Dense>
#include <boost/math/distributions/chi_squared.hpp>
#include <boost/math/quadrature/exp_sinh.hpp>
#include <boost/math/quadrature/gauss_kronrod.hpp>
#include <boost/math/quadrature/tanh_sinh.hpp>

#include <algorithm>
#include <cmath>
#include <functional>
#include <numbers>
#include <vector>

namespace oracle {

using Vec = Eigen::VectorXd;
using Mat = Eigen::MatrixXd;

// --- quadrature -----------------------------------------------------------

inline double integrate(const std::function<double(double)>& f, double a, double b) {
  return boost::math::quadrature::gauss_kronrod<double, 61>::integrate(f, a, b, 15, 1e-14);
}

inline double integrate_to_inf(const std::function<double(double)>& f, double a) {
  boost::math::quadrature::exp_sinh<double> q;
  return q.integrate([&](double x) { return f(x); }, a, std::numeric_limits<double>::infinity());
}

inline double integrate_from_neg_inf(const std::function<double(double)>& f, double b) {
  boost::math::quadrature::exp_sinh<double> q;
  return q.integrate([&](double x) { return f(-x); }, -b, std::numeric_limits<double>::infinity());
}

// AL(tau, sigma) density written out directly.
inline double al_density(double eps, double tau, double sigma) {
  const double u = eps / sigma;
  const double rho = u * (tau - (u < 0 ? 1.0 : 0.0));
  return tau * (1.0 - tau) / sigma * std::exp(-rho);
}

// Distribution function of AL by quadrature of the density.
inline double al_cdf_quadrature(double x, double tau, double sigma) {
  if (x <= 0.0) return integrate_from_neg_inf([&](double e) { return al_density(e, tau, sigma); }, x);
  return integrate_from_neg_inf([&](double e) { return al_density(e, tau, sigma); }, 0.0) +
         integrate([&](double e) { return al_density(e, tau, sigma); }, 0.0, x);
}

/// Raw moment E[X^k] of GIG(lambda, chi, psi) by quadrature of the density.
inline double gig_moment(double lambda, double chi, double psi, int k) {
  // On s = log x the integrand of E[X^p] is x^{lambda + p} exp(-(chi/x + psi x)/2); each power
  // is scaled by its own peak so the quadrature nodes resolve it, and the ratio is taken in logs.
  auto log_integrand = [&](double s, int power) {
    const double x = std::exp(s);
    return (lambda + power) * s - 0.5 * (chi / x + psi * x);
  };
  auto log_integral = [&](int power) {
    const double a = lambda + power;
    const double mode = (a + std::sqrt(a * a + chi * psi)) / psi;  // argmax on the log scale
    const double s0 = std::log(mode);
    const double peak = log_integrand(s0, power);
    auto f = [&](double u) {
      const double v = std::exp(log_integrand(s0 + u, power) - peak);
      return std::isfinite(v) ? v : 0.0;
    };
    return peak + std::log(integrate(f, -60.0, 0.0) + integrate(f, 0.0, 60.0));
  };
  return std::exp(log_integral(k) - log_integral(0));
}

// --- goodness of fit ------------------------------------------------------

inline double ks_statistic(std::vector<double> xs, const std::function<double(double)>& cdf) {
  std::sort(xs.begin(), xs.end());
  const double n = static_cast<double>(xs.size());
  double d = 0.0;
  for (std::size_t i = 0; i < xs.size(); ++i) {
    const double F = cdf(xs[i]);
    d = std::max({d, std::abs((static_cast<double>(i) + 1.0) / n - F), std::abs(F - static_cast<double>(i) / n)});
  }
  return d;
}

inline double ks_two_sample(std::vector<double> a, std::vector<double> b) {
  std::sort(a.begin(), a.end());
  std::sort(b.begin(), b.end());
  std::size_t i = 0, j = 0;
  double d = 0.0;
  const double na = static_cast<double>(a.size()), nb = static_cast<double>(b.size());
  while (i < a.size() && j < b.size()) {
    const double x = std::min(a[i], b[j]);
    while (i < a.size() && a[i] <= x) ++i;
    while (j < b.size() && b[j] <= x) ++j;
    d = std::max(d, std::abs(static_cast<double>(i) / na - static_cast<double>(j) / nb));
  }
  return d;
}

/// Critical value of the one-sample Kolmogorov statistic at level alpha:
/// limiting distribution with the Stephens finite-n adjustment.
inline double kolmogorov_band(std::size_t n, double alpha) {
  auto tail = [](double x) {
    double s = 0.0;
    for (int k = 1; k <= 100; ++k) s += 2.0 * ((k % 2) ? 1.0 : -1.0) * std::exp(-2.0 * k * k * x * x);
    return s;
  };
  double lo = 0.2, hi = 5.0;
  for (int it = 0; it < 200; ++it) {
    const double mid = 0.5 * (lo + hi);
    (tail(mid) > alpha ? lo : hi) = mid;
  }
  const double rn = std::sqrt(static_cast<double>(n));
  return 0.5 * (lo + hi) / (rn + 0.12 + 0.11 / rn);
}

/// Pearson chi-square p-value of observed counts against expected bin probabilities.
inline double chi_square_pvalue(const std::vector<double>& observed, const std::vector<double>& probs, double n,
                                int estimated_params = 0) {
  double stat = 0.0;
  for (std::size_t k = 0; k < observed.size(); ++k) {
    const double e = n * probs[k];
    stat += (observed[k] - e) * (observed[k] - e) / e;
  }
  boost::math::chi_squared dist(static_cast<double>(observed.size()) - 1.0 - estimated_params);
  return boost::math::cdf(boost::math::complement(dist, stat));
}

struct Moments {
  double mean;
  double var;
  double se;  // standard error of the mean
};

inline Moments moments(const std::vector<double>& xs) {
  const double n = static_cast<double>(xs.size());
  double m = 0.0;
  for (double x : xs) m += x;
  m /= n;
  double v = 0.0;
  for (double x : xs) v += (x - m) * (x - m);
  v /= (n - 1.0);
  return {m, v, std::sqrt(v / n)};
}

// --- Gaussian algebra -----------------------------------------------------

inline double mvn_logpdf(const Vec& x, const Vec& mean, const Mat& cov) {
  Eigen::LDLT<Mat> ldlt(cov);
  const Vec r = x - mean;
  const double quad = r.dot(ldlt.solve(r));
  const double logdet = ldlt.vectorD().array().log().sum();
  return -0.5 * (static_cast<double>(x.size()) * std::log(2.0 * std::numbers::pi) + logdet + quad);
}

/// Dense joint model for y_t = offset_t + F_t u_t + e_t, u_t = u_{t-1} + w_t,
/// u_0 ~ N(m0, C0), with discount-implied W_t supplied by `evolution`.
struct DenseStateSpace {
  Vec joint_mean_y;
  Mat joint_cov_y;
  Vec mean_u;     // stacked u_1..u_T prior mean
  Mat cov_u;      // prior covariance of stacked states
  Mat cov_u_y;    // Cov(u, y)
};

/// Discount-implied evolution covariances W_t = C_{t-1} (1 - delta) / delta where
/// C follows the Gaussian covariance recursion (independent of y values).
inline std::vector<Mat> discount_evolution(const std::vector<Mat>& F, const std::vector<Vec>& obs_var, const Mat& C0,
                                           double delta) {
  std::vector<Mat> W;
  Mat C = C0;
  for (std::size_t t = 0; t < F.size(); ++t) {
    W.push_back(C * (1.0 - delta) / delta);
    const Mat R = C / delta;
    Mat Q = F[t] * R * F[t].transpose();
    Q += obs_var[t].asDiagonal();
    C = R - R * F[t].transpose() * Q.inverse() * F[t] * R;
  }
  return W;
}

inline DenseStateSpace dense_state_space(const std::vector<Mat>& F, const std::vector<Vec>& offset,
                                         const std::vector<Vec>& obs_var, const Vec& m0, const Mat& C0,
                                         const std::vector<Mat>& W) {
  const auto T = F.size();
  const auto p = m0.size();
  Eigen::Index ny = 0;
  for (const auto& f : F) ny += f.rows();
  DenseStateSpace out;
  out.mean_u = m0.replicate(static_cast<Eigen::Index>(T), 1);
  out.cov_u = Mat::Zero(static_cast<Eigen::Index>(T) * p, static_cast<Eigen::Index>(T) * p);
  // Cov(u_s, u_t) = C0 + sum_{r <= min(s,t)} W_r
  std::vector<Mat> cum(T);
  Mat acc = C0;
  for (std::size_t t = 0; t < T; ++t) {
    acc += W[t];
    cum[t] = acc;
  }
  for (std::size_t s = 0; s < T; ++s)
    for (std::size_t t = 0; t < T; ++t)
      out.cov_u.block(static_cast<Eigen::Index>(s) * p, static_cast<Eigen::Index>(t) * p, p, p) = cum[std::min(s, t)];
  Mat G = Mat::Zero(ny, static_cast<Eigen::Index>(T) * p);
  Vec off(ny), noise(ny);
  Eigen::Index row = 0;
  for (std::size_t t = 0; t < T; ++t) {
    const auto n = F[t].rows();
    G.block(row, static_cast<Eigen::Index>(t) * p, n, p) = F[t];
    off.segment(row, n) = offset[t];
    noise.segment(row, n) = obs_var[t];
    row += n;
  }
  out.joint_mean_y = off + G * out.mean_u;
  out.joint_cov_y = G * out.cov_u * G.transpose();
  out.joint_cov_y.diagonal() += noise;
  out.cov_u_y = out.cov_u * G.transpose();
  return out;
}

/// Posterior mean E[u | y] by dense Gaussian conditioning.
inline Vec dense_smoother_mean(const DenseStateSpace& ss, const Vec& y) {
  return ss.mean_u + ss.cov_u_y * ss.joint_cov_y.ldlt().solve(y - ss.joint_mean_y);
}

/// One-observation normal-gamma update in precision form.
/// Prior theta | phi ~ N(m0, C0/(phi s0)), phi ~ Ga(n0/2, n0 s0/2);
/// observation z = F' theta + N(0, kappa2 v / phi), plus an Exp(mean 1/phi) term in v.
struct NormalGammaPosterior {
  Vec mean;
  Mat cov_times_phi;  // Cov(theta | phi) * phi
  double shape;
  double rate;
};

inline NormalGammaPosterior normal_gamma_single(const Vec& m0, const Mat& C0, double n0, double s0, const Vec& F,
                                                double z, double kappa2, double v) {
  const Mat P0 = s0 * C0.inverse();
  const Mat P1 = P0 + F * F.transpose() / (kappa2 * v);
  const Vec m1 = P1.inverse() * (P0 * m0 + F * z / (kappa2 * v));
  NormalGammaPosterior out;
  out.mean = m1;
  out.cov_times_phi = P1.inverse();
  out.shape = n0 / 2.0 + 0.5 + 1.0;
  out.rate = n0 * s0 / 2.0 + 0.5 * (z * z / (kappa2 * v) + m0.dot(P0 * m0) - m1.dot(P1 * m1)) + v;
  return out;
}

}  // namespace oracle
