#pragma once

// Agent forecasts: the container consumed by the synthesizers, its CSV
// format, and the dynamic quantile linear model (DQLM) agent.

#include "drqs/core.hpp"
#include "drqs/dlm.hpp"
#include "drqs/io.hpp"
#include "drqs/stats.hpp"

#include <algorithm>
#include <map>
#include <set>
#include <tuple>

namespace drqs {

/// Predictive mean `a` and variance `A` of one agent's tau-quantile forecast.
struct AgentForecast {
  std::int64_t time = 0;
  double tau = 0.5;
  double a = 0.0;
  double A = 1.0;
};

// Per-time agent moments for one series and one tau, T x J each.
struct AgentInputs {
  Matrix mean;
  Matrix var;
};

class AgentForecastSet {
 public:
  struct Key {
    std::string series;
    std::int64_t time;
    std::string agent;
    std::int64_t tau;
    auto operator<=>(const Key&) const = default;
  };

  bool quarterly = false;

  void insert(const std::string& series, std::int64_t time, const std::string& agent, double tau, double a,
              double A) {
    QuantileLevel{tau};
    if (!(A > 0.0) || !std::isfinite(A) || !std::isfinite(a)) {
      throw std::invalid_argument("agent forecast needs finite a and positive finite A");
    }
    Key key{series, time, agent, tau_key(tau)};
    if (!entries_.emplace(key, AgentForecast{time, tau, a, A}).second) {
      throw std::invalid_argument("duplicate agent forecast for series " + series + ", agent " + agent);
    }
  }

  void merge(const AgentForecastSet& other) {
    for (const auto& [k, v] : other.entries_) insert(k.series, k.time, k.agent, v.tau, v.a, v.A);
  }

  std::size_t size() const { return entries_.size(); }
  bool empty() const { return entries_.empty(); }

  const AgentForecast* find(const std::string& series, std::int64_t time, const std::string& agent,
                            double tau) const {
    auto it = entries_.find(Key{series, time, agent, tau_key(tau)});
    return it == entries_.end() ? nullptr : &it->second;
  }

  const AgentForecast& at(const std::string& series, std::int64_t time, const std::string& agent, double tau) const {
    if (const auto* f = find(series, time, agent, tau)) return *f;
    throw std::out_of_range("no agent forecast for series " + series + ", agent " + agent + ", time " +
                            format_time(time, quarterly) + ", tau " + format_double(tau));
  }

  std::vector<std::string> series() const {
    std::set<std::string> s;
    for (const auto& [k, v] : entries_) s.insert(k.series);
    return {s.begin(), s.end()};
  }
  std::vector<std::string> agents() const {
    std::set<std::string> s;
    for (const auto& [k, v] : entries_) s.insert(k.agent);
    return {s.begin(), s.end()};
  }
  std::vector<double> taus() const {
    std::map<std::int64_t, double> s;
    for (const auto& [k, v] : entries_) s.emplace(k.tau, v.tau);
    std::vector<double> out;
    for (const auto& [k, v] : s) out.push_back(v);
    return out;
  }
  std::vector<std::int64_t> times(const std::string& series) const {
    std::set<std::int64_t> s;
    for (const auto& [k, v] : entries_)
      if (k.series == series) s.insert(k.time);
    return {s.begin(), s.end()};
  }

  /// Agent moments over [t_from, t_to] in the given agent order.
  AgentInputs inputs(const std::string& series, double tau, const std::vector<std::string>& agents,
                     std::int64_t t_from, std::int64_t t_to) const {
    const auto T = static_cast<Eigen::Index>(std::max<std::int64_t>(t_to - t_from + 1, 0));
    const auto J = static_cast<Eigen::Index>(agents.size());
    AgentInputs out{Matrix(T, J), Matrix(T, J)};
    for (Eigen::Index t = 0; t < T; ++t) {
      for (Eigen::Index j = 0; j < J; ++j) {
        const auto& f = at(series, t_from + t, agents[static_cast<std::size_t>(j)], tau);
        out.mean(t, j) = f.a;
        out.var(t, j) = f.A;
      }
    }
    return out;
  }

  /// Every (series, agent, tau) must cover the same gap-free run of times.
  void validate_complete() const {
    for (const auto& s : series()) {
      const auto ts = times(s);
      for (std::size_t i = 1; i < ts.size(); ++i) {
        if (ts[i] != ts[i - 1] + 1) throw SchemaError("agent forecasts for series " + s + " have a time gap");
      }
      for (const auto& a : agents()) {
        for (double tau : taus()) {
          for (auto t : ts) {
            if (!find(s, t, a, tau)) {
              throw SchemaError("agent forecasts incomplete: series " + s + ", agent " + a + ", tau " +
                                format_double(tau) + ", time " + format_time(t, quarterly));
            }
          }
        }
      }
    }
  }

  const std::map<Key, AgentForecast>& entries() const { return entries_; }

 private:
  std::map<Key, AgentForecast> entries_;
};

inline const std::vector<std::string>& agent_forecast_header() {
  static const std::vector<std::string> h{"series", "time", "agent", "tau", "a", "A"};
  return h;
}

/// Read `series,time,agent,tau,a,A`. Errors name the offending file row.
inline AgentForecastSet load_agent_forecasts(const std::string& path) {
  const auto table = read_csv(path);
  const auto& want = agent_forecast_header();
  std::vector<std::size_t> col;
  for (const auto& name : want) col.push_back(table.require_column(name));

  AgentForecastSet set;
  std::optional<bool> quarterly;
  for (std::size_t r = 0; r < table.rows.size(); ++r) {
    const auto& row = table.rows[r];
    const long line = table.line_numbers[r];
    for (auto c : col)
      if (row[c].empty()) throw SchemaError("missing cell in column '" + table.header[c] + "'", line);
    const auto time = parse_time(row[col[1]]);
    if (!time) throw SchemaError("unparseable time '" + row[col[1]] + "'", line);
    if (quarterly && *quarterly != time->quarterly) throw SchemaError("mixed time formats", line);
    quarterly = time->quarterly;
    const auto tau = parse_double(row[col[3]]);
    const auto a = parse_double(row[col[4]]);
    const auto A = parse_double(row[col[5]]);
    if (!tau || !(*tau > 0.0 && *tau < 1.0)) throw SchemaError("tau out of range (0,1)", line);
    if (!a || !std::isfinite(*a)) throw SchemaError("non-numeric predictive mean", line);
    if (!A || !(*A > 0.0) || !std::isfinite(*A)) throw SchemaError("predictive variance must be positive", line);
    if (set.find(row[col[0]], time->value, row[col[2]], *tau)) throw SchemaError("duplicate forecast key", line);
    set.insert(row[col[0]], time->value, row[col[2]], *tau, *a, *A);
  }
  set.quarterly = quarterly.value_or(false);
  set.validate_complete();
  return set;
}

inline void write_agent_forecasts(const std::string& path, const AgentForecastSet& set) {
  CsvWriter out(path, agent_forecast_header());
  for (const auto& [k, f] : set.entries()) {
    char tau[32];
    std::snprintf(tau, sizeof(tau), "%.4f", f.tau);
    out.row({k.series, format_time(k.time, set.quarterly), k.agent, tau, format_double(f.a), format_double(f.A)});
  }
}

// ---------------------------------------------------------------------------
// DQLM agent: y_t = x_t' b_t + eps_t, eps_t ~ AL(tau, sigma), b_t random walk
// with discount delta; b_0 ~ N(0, prior_var I), sigma ~ IG(shape, rate).

struct DqlmSpec {
  QuantileLevel tau{0.5};
  double delta = 0.95;
  double prior_var = 1000.0;
  double sigma_shape = 0.01;
  double sigma_rate = 0.01;

  void validate() const {
    if (!(delta > 0.0 && delta <= 1.0)) throw ConfigError("DQLM discount must lie in (0,1]");
    if (!(prior_var > 0.0) || !(sigma_shape > 0.0) || !(sigma_rate > 0.0)) {
      throw ConfigError("DQLM prior parameters must be positive");
    }
  }
};

struct DqlmDraw {
  Matrix beta;  // T x P path (only the last row when paths are not kept)
  Vector beta_T;
  Matrix C_T;  // filtered covariance of b_T
  double sigma;
};

struct DqlmPosterior {
  std::vector<DqlmDraw> draws;
  double delta = 1.0;
};

inline DqlmPosterior fit_dqlm(const Vector& y, const Matrix& X, const DqlmSpec& spec, const McmcConfig& mcmc,
                              Rng& rng) {
  spec.validate();
  mcmc.validate();
  const auto T = y.size();
  const auto P = X.cols();
  if (X.rows() != T) throw std::invalid_argument("DQLM: X rows must match y");
  if (P < 1) throw std::invalid_argument("DQLM: at least one predictor required");
  if (T < P) throw std::invalid_argument("DQLM: need at least as many observations as predictors");
  if (!X.allFinite() || !y.allFinite()) throw std::invalid_argument("DQLM: missing or non-finite data");

  const auto k = mixture_constants(spec.tau);
  const GaussianPrior prior{Vector::Zero(P), spec.prior_var * Matrix::Identity(P, P)};

  KnownVarianceModel model;
  model.y.assign(static_cast<std::size_t>(T), Vector(1));
  model.design.assign(static_cast<std::size_t>(T), Matrix(1, P));
  model.offset.assign(static_cast<std::size_t>(T), Vector(1));
  model.obs_var.assign(static_cast<std::size_t>(T), Vector(1));
  for (Eigen::Index t = 0; t < T; ++t) {
    model.y[t](0) = y(t);
    model.design[t] = X.row(t);
  }

  Matrix beta = Matrix::Zero(T, P);
  Vector v = Vector::Ones(T);
  double sigma = 1.0;

  DqlmPosterior post;
  post.delta = spec.delta;
  post.draws.reserve(static_cast<std::size_t>(mcmc.draws));
  const int total = mcmc.burnin + mcmc.draws;
  for (int it = 0; it < total; ++it) {
    try {
      const Vector fit = (X.array() * beta.array()).rowwise().sum();
      for (Eigen::Index t = 0; t < T; ++t) v(t) = sample_mixing_variable(y(t) - fit(t), sigma, k, rng);

      for (Eigen::Index t = 0; t < T; ++t) {
        model.offset[t](0) = k.kappa1 * v(t);
        model.obs_var[t](0) = sigma * k.kappa2 * v(t);
      }
      auto traj = ffbs_known_variance(model, prior, spec.delta, rng);
      beta = std::move(traj.states);

      const Vector fit2 = (X.array() * beta.array()).rowwise().sum();
      const Vector resid = y - fit2 - k.kappa1 * v;
      const double rate =
          spec.sigma_rate + (resid.array().square() / (2.0 * k.kappa2 * v.array()) + v.array()).sum();
      const double shape = spec.sigma_shape + 1.5 * static_cast<double>(T);
      sigma = 1.0 / sample_gamma(shape, rate, rng);
      if (!std::isfinite(sigma) || !(sigma > 0.0)) throw NumericalError("non-finite DQLM scale");

      if (it >= mcmc.burnin) {
        DqlmDraw d;
        d.beta = mcmc.keep_paths ? beta : Matrix(beta.bottomRows(1));
        d.beta_T = beta.row(T - 1).transpose();
        d.C_T = traj.C_T;
        d.sigma = sigma;
        post.draws.push_back(std::move(d));
      }
    } catch (const NumericalError& e) {
      throw NumericalError(std::string("DQLM sampler failed: ") + e.what(), it);
    }
  }
  return post;
}

/// One-step-ahead moments of x' b_{T+1} under the mixture over retained draws,
/// b_{T+1} | draw ~ N(b_T, C_T (1 - delta) / delta).
inline AgentForecast forecast_dqlm(const DqlmPosterior& post, const Vector& x_next, std::int64_t time = 0,
                                   double tau = 0.5) {
  if (post.draws.size() < 50) throw std::invalid_argument("DQLM forecast needs at least 50 retained draws");
  if (!x_next.allFinite()) throw std::invalid_argument("DQLM forecast: predictors must be observed");
  const double D = static_cast<double>(post.draws.size());
  const double inflate = (1.0 - post.delta) / post.delta;
  double mean = 0.0;
  double evo = 0.0;
  for (const auto& d : post.draws) {
    mean += x_next.dot(d.beta_T);
    evo += inflate * x_next.dot(d.C_T * x_next);
  }
  mean /= D;
  double spread = 0.0;
  for (const auto& d : post.draws) {
    const double c = x_next.dot(d.beta_T) - mean;
    spread += c * c;
  }
  const double var = std::max(spread / D + evo / D, 1e-10);
  return {time, tau, mean, var};
}

}  // namespace drqs
