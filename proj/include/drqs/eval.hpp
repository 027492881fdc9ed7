#pragma once

// Forecast evaluation: quantile-weighted CRPS on a tau grid, cumulative score
// ratios, PIT and predictive-density reconstruction from grid quantiles.

#include "drqs/core.hpp"
#include "drqs/stats.hpp"

#include <boost/math/distributions/normal.hpp>

#include <algorithm>
#include <numeric>
#include <span>
#include <string>
#include <vector>

namespace drqs {

class QuantileGrid {
 public:
  explicit QuantileGrid(std::vector<double> taus) : taus_(std::move(taus)) {
    if (taus_.empty()) throw std::invalid_argument("quantile grid is empty");
    for (std::size_t k = 0; k < taus_.size(); ++k) {
      QuantileLevel{taus_[k]};
      if (k > 0 && !(taus_[k] > taus_[k - 1])) throw std::invalid_argument("quantile grid must be strictly increasing");
    }
  }

  /// 0.05, 0.10, ..., 0.95
  static QuantileGrid standard() {
    std::vector<double> t;
    for (int k = 1; k <= 19; ++k) t.push_back(0.05 * k);
    return QuantileGrid(std::move(t));
  }

  const std::vector<double>& taus() const { return taus_; }
  std::size_t size() const { return taus_.size(); }
  double operator[](std::size_t k) const { return taus_[k]; }

 private:
  std::vector<double> taus_;
};

enum class WeightScheme { none, right, left };

inline double weight(WeightScheme w, double tau) {
  switch (w) {
    case WeightScheme::none: return 1.0;
    case WeightScheme::right: return tau * tau;
    case WeightScheme::left: return (1.0 - tau) * (1.0 - tau);
  }
  return 1.0;
}

inline std::string to_string(WeightScheme w) {
  switch (w) {
    case WeightScheme::none: return "none";
    case WeightScheme::right: return "right";
    case WeightScheme::left: return "left";
  }
  return "none";
}

inline constexpr WeightScheme kAllSchemes[] = {WeightScheme::none, WeightScheme::right, WeightScheme::left};

/// Trapezoid-rule quantile-weighted CRPS over the grid span (no extrapolation
/// beyond the first and last grid node).
inline double crps_quantile_weighted(double y, std::span<const double> qhat, const QuantileGrid& grid,
                                     WeightScheme w) {
  if (qhat.size() != grid.size()) throw std::invalid_argument("CRPS: forecast length does not match grid");
  std::vector<double> g(grid.size());
  for (std::size_t k = 0; k < grid.size(); ++k) {
    const double tau = grid[k];
    g[k] = 2.0 * ((y < qhat[k] ? 1.0 : 0.0) - tau) * (qhat[k] - y) * weight(w, tau);
  }
  double s = 0.0;
  for (std::size_t k = 1; k < grid.size(); ++k) s += 0.5 * (grid[k] - grid[k - 1]) * (g[k] + g[k - 1]);
  return s;
}

/// Ratio of cumulative scores over positions [start, stop] (inclusive).
inline double rcs(std::span<const double> self, std::span<const double> ref, std::size_t start, std::size_t stop) {
  if (stop < start || stop >= self.size() || stop >= ref.size()) throw std::invalid_argument("RCS: window out of range");
  double num = 0.0;
  double den = 0.0;
  for (std::size_t t = start; t <= stop; ++t) {
    num += self[t];
    den += ref[t];
  }
  if (!(den > 0.0)) throw std::domain_error("RCS: reference cumulative score is zero");
  return num / den;
}

/// Cumulative ratio summed over series; rows are series, positions are times.
inline double rtcs(const std::vector<std::vector<double>>& self, const std::vector<std::vector<double>>& ref,
                   std::size_t start, std::size_t stop) {
  if (self.size() != ref.size()) throw std::invalid_argument("RTCS: series count mismatch");
  double num = 0.0;
  double den = 0.0;
  for (std::size_t i = 0; i < self.size(); ++i) {
    if (stop < start || stop >= self[i].size() || stop >= ref[i].size()) {
      throw std::invalid_argument("RTCS: window out of range");
    }
    for (std::size_t t = start; t <= stop; ++t) {
      num += self[i][t];
      den += ref[i][t];
    }
  }
  if (!(den > 0.0)) throw std::domain_error("RTCS: reference cumulative score is zero");
  return num / den;
}

/// Fraction of predictive draws at or above the realization.
inline double pit(double y, std::span<const double> draws) {
  if (draws.empty()) throw std::invalid_argument("PIT: no draws");
  std::size_t c = 0;
  for (double d : draws)
    if (y <= d) ++c;
  return static_cast<double>(c) / static_cast<double>(draws.size());
}

// ---------------------------------------------------------------------------
// Density reconstruction from grid quantiles.

enum class TailMode {
  truncated,    // tail draws restricted beyond the outermost grid quantiles
  untruncated,  // plain draws from the fitted tail normals
};

struct ReconstructedPredictive {
  std::vector<double> draws;
  double mu_left = 0.0;
  double sigma_left = 1.0;
  double mu_right = 0.0;
  double sigma_right = 1.0;
  std::vector<std::size_t> counts;  // left tail, K-1 interior pieces, right tail
};

inline std::vector<double> monotone_rearrange(std::vector<double> q) {
  std::sort(q.begin(), q.end());
  return q;
}

inline double std_normal_quantile(double p) { return boost::math::quantile(boost::math::normal(), p); }
inline double std_normal_cdf(double x) { return boost::math::cdf(boost::math::normal(), x); }

/// Largest-remainder rounding of weights * R so the integer counts sum to R.
inline std::vector<std::size_t> apportion(const std::vector<double>& weights, std::size_t R) {
  const double total = std::accumulate(weights.begin(), weights.end(), 0.0);
  std::vector<std::size_t> counts(weights.size());
  std::vector<std::pair<double, std::size_t>> rem;
  std::size_t used = 0;
  for (std::size_t k = 0; k < weights.size(); ++k) {
    // round-off guard so exact products like 0.05 * 10000 are not floored to 499
    const double exact = weights[k] / total * static_cast<double>(R);
    const double fl = std::floor(exact + 1e-9);
    counts[k] = static_cast<std::size_t>(fl);
    used += counts[k];
    rem.emplace_back(exact - fl, k);
  }
  std::stable_sort(rem.begin(), rem.end(), [](const auto& a, const auto& b) { return a.first > b.first; });
  for (std::size_t r = 0; used < R; ++r, ++used) ++counts[rem[r % rem.size()].second];
  return counts;
}

// Normal (mu, sigma) through two quantile points.
inline std::pair<double, double> fit_normal_through(double q1, double tau1, double q2, double tau2) {
  const double z1 = std_normal_quantile(tau1);
  const double z2 = std_normal_quantile(tau2);
  const double sigma = (q2 - q1) / (z2 - z1);
  if (!(sigma > 0.0)) throw std::domain_error("tail fit: coincident quantiles give zero scale");
  return {q1 - sigma * z1, sigma};
}

inline ReconstructedPredictive reconstruct_predictive(std::vector<double> qhat, const QuantileGrid& grid,
                                                      std::size_t R, Rng& rng,
                                                      TailMode mode = TailMode::truncated) {
  const auto K = grid.size();
  if (K < 4) throw std::invalid_argument("reconstruction needs at least 4 grid nodes");
  if (qhat.size() != K) throw std::invalid_argument("reconstruction: forecast length does not match grid");
  qhat = monotone_rearrange(std::move(qhat));

  ReconstructedPredictive out;
  std::tie(out.mu_left, out.sigma_left) = fit_normal_through(qhat[0], grid[0], qhat[1], grid[1]);
  std::tie(out.mu_right, out.sigma_right) = fit_normal_through(qhat[K - 2], grid[K - 2], qhat[K - 1], grid[K - 1]);

  std::vector<double> w;
  w.push_back(grid[0]);
  for (std::size_t k = 1; k < K; ++k) w.push_back(grid[k] - grid[k - 1]);
  w.push_back(1.0 - grid[K - 1]);
  out.counts = apportion(w, R);

  std::uniform_real_distribution<double> unif(0.0, 1.0);
  out.draws.reserve(R);
  // Left tail. Truncated mode inverts the fitted normal on (0, tau_1].
  for (std::size_t r = 0; r < out.counts.front(); ++r) {
    if (mode == TailMode::truncated) {
      const double u = std::max(unif(rng), 1e-300) * grid[0];
      out.draws.push_back(out.mu_left + out.sigma_left * std_normal_quantile(u));
    } else {
      out.draws.push_back(out.mu_left + out.sigma_left * sample_std_normal(rng));
    }
  }
  // Interior pieces on (lo, hi].
  for (std::size_t k = 1; k < K; ++k) {
    const double lo = qhat[k - 1];
    const double hi = qhat[k];
    for (std::size_t r = 0; r < out.counts[k]; ++r) out.draws.push_back(hi - (hi - lo) * unif(rng));
  }
  for (std::size_t r = 0; r < out.counts.back(); ++r) {
    if (mode == TailMode::truncated) {
      const double u = grid[K - 1] + (1.0 - grid[K - 1]) * unif(rng);
      out.draws.push_back(out.mu_right + out.sigma_right * std_normal_quantile(std::min(u, 1.0 - 1e-16)));
    } else {
      out.draws.push_back(out.mu_right + out.sigma_right * sample_std_normal(rng));
    }
  }
  return out;
}

}  // namespace drqs
