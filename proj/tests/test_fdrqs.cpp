#include "drqs/fdrqs.hpp"
#include "oracles.hpp"

#include <gtest/gtest.h>

using namespace drqs;

TEST(Mgp, CumulativeShrinkageIsRunningProduct) {
  Vector d(3);
  d << 2.0, 3.0, 0.5;
  const Vector w = cumulative_shrinkage(d);
  EXPECT_EQ(w(0), 2.0);
  EXPECT_EQ(w(1), 6.0);
  EXPECT_EQ(w(2), 3.0);
  Vector tiny = Vector::Constant(4, 1e-100);
  EXPECT_THROW(cumulative_shrinkage(tiny), NumericalError);
}

TEST(Mgp, ZeroLoadingsGiveGammaPriorPlusCount) {
  const int N = 4, L = 3;
  Vector delta(L);
  delta << 1.7, 0.4, 2.2;
  const Matrix lambda = Matrix::Zero(N, L);
  const Matrix phi = Matrix::Constant(N, L, 3.0);
  const auto [shape, rate] = global_shrinkage_conditional(0, delta, lambda, phi, 2.5, 3.5);
  EXPECT_EQ(shape, N * L / 2.0 + 2.5);
  EXPECT_EQ(rate, 1.0);
  const auto [shape2, rate2] = global_shrinkage_conditional(2, delta, lambda, phi, 2.5, 3.5);
  EXPECT_EQ(shape2, N * 1 / 2.0 + 3.5);
  EXPECT_EQ(rate2, 1.0);
}

TEST(Mgp, ShrinkageConditionalMatchesBruteForce) {
  Rng rng(4);
  const int N = 3, L = 4;
  Matrix lambda(N, L), phi(N, L);
  for (int i = 0; i < N; ++i)
    for (int l = 0; l < L; ++l) {
      lambda(i, l) = sample_std_normal(rng);
      phi(i, l) = 0.5 + sample_gamma(2.0, 1.0, rng);
    }
  Vector delta(L);
  delta << 1.3, 2.1, 0.7, 1.9;
  for (int h = 0; h < L; ++h) {
    double rate = 1.0;
    for (int l = h; l < L; ++l) {
      double omega_h = 1.0;
      for (int s = 0; s <= l; ++s)
        if (s != h) omega_h *= delta(s);
      for (int i = 0; i < N; ++i) rate += 0.5 * omega_h * phi(i, l) * lambda(i, l) * lambda(i, l);
    }
    const auto [shape, r] = global_shrinkage_conditional(h, delta, lambda, phi, 2.5, 3.5);
    EXPECT_NEAR(r, rate, 1e-12 * rate);
    EXPECT_EQ(shape, N * (L - h) / 2.0 + (h == 0 ? 2.5 : 3.5));
  }
}

TEST(Mgp, PriorPrecisionsIncreaseWithIndex) {
  Rng rng(10);
  const int L = 5, draws = 100000;
  std::vector<std::vector<double>> diffs(L - 1);
  for (int r = 0; r < draws; ++r) {
    const auto p = sample_mgp_prior(L, 2.5, 3.5, rng);
    for (int l = 0; l + 1 < L; ++l) diffs[l].push_back(p.omega(l + 1) - p.omega(l));
  }
  for (int l = 0; l + 1 < L; ++l) {
    const auto m = oracle::moments(diffs[l]);
    EXPECT_GT(m.mean, 3 * m.se) << "l=" << l;
  }
}

TEST(Mgp, LocalPrecisionMatchesWrittenDensity) {
  // phi | rest has density proportional to
  // phi^{nu/2 - 1} exp(-nu phi / 2) * phi^{1/2} exp(-omega lambda^2 phi / 2).
  const double nu = 3.0, omega = 2.5, lambda = 0.8;
  auto dens = [&](double x) {
    return std::pow(x, nu / 2.0 - 0.5) * std::exp(-0.5 * x * (nu + omega * lambda * lambda));
  };
  const std::vector<double> edges{0.0, 0.1, 0.2, 0.35, 0.5, 0.7, 1.0, 1.4, 2.0, 3.0};
  const double z = oracle::integrate_to_inf(dens, 0.0);
  std::vector<double> probs;
  for (std::size_t b = 0; b + 1 < edges.size(); ++b) probs.push_back(oracle::integrate(dens, edges[b], edges[b + 1]) / z);
  probs.push_back(oracle::integrate_to_inf(dens, edges.back()) / z);

  Rng rng(99);
  const int n = 100000;
  std::vector<double> counts(probs.size(), 0.0);
  for (int r = 0; r < n; ++r) {
    const double x = sample_local_precision(nu, omega, lambda, rng);
    const auto it = std::upper_bound(edges.begin(), edges.end(), x);
    counts[static_cast<std::size_t>(it - edges.begin()) - 1] += 1.0;
  }
  EXPECT_GT(oracle::chi_square_pvalue(counts, probs, n), 0.01);
}

namespace {

struct Panel {
  Matrix Y;
  std::vector<AgentInputs> agents;
};

Panel random_panel(int N, int T, int J, Rng& rng) {
  Panel p{Matrix(N, T), {}};
  for (int i = 0; i < N; ++i) {
    AgentInputs in{Matrix(T, J), Matrix::Constant(T, J, 0.3)};
    for (int t = 0; t < T; ++t) {
      for (int j = 0; j < J; ++j) in.mean(t, j) = std::sin(0.2 * t + i + j) + 0.3 * sample_std_normal(rng);
      p.Y(i, t) = in.mean.row(t).mean() + 0.5 * sample_std_normal(rng);
    }
    p.agents.push_back(in);
  }
  return p;
}

}  // namespace

TEST(Fdrqs, ThetaIsDerivedExactly) {
  Rng rng(1);
  const int N = 3, T = 15, J = 2;
  const auto panel = random_panel(N, T, J, rng);
  auto cfg = FdrqsConfig::defaults(QuantileLevel{0.5}, N, J, 2);
  const auto post = gibbs_fdrqs(panel.Y, panel.agents, cfg, {20, 10, true}, rng);
  for (const auto& d : post.draws) {
    for (int j = 0; j <= J; ++j) {
      const Matrix re = synthesis_weights(d.factors.loadings, d.factors.u, j);
      EXPECT_EQ((re - d.theta[j]).cwiseAbs().maxCoeff(), 0.0);
    }
    for (int j = 0; j <= J; ++j) {
      const Vector expect = cumulative_shrinkage(d.factors.deltas.row(j).transpose());
      EXPECT_EQ((d.factors.omegas.row(j).transpose() - expect).norm(), 0.0);
    }
    EXPECT_TRUE((d.v.array() > 0.0).all());
    EXPECT_TRUE((d.sigma.array() > 0.0).all());
  }
}

TEST(Fdrqs, ObservationDensityInvariantUnderRotation) {
  Rng rng(6);
  const int N = 4, T = 12, J = 2, L = 3;
  std::vector<Matrix> loadings(J + 1, Matrix(N, L));
  for (auto& l : loadings)
    for (int i = 0; i < N; ++i)
      for (int c = 0; c < L; ++c) l(i, c) = sample_std_normal(rng);
  Matrix u(T, L * (J + 1));
  for (int t = 0; t < T; ++t)
    for (int c = 0; c < u.cols(); ++c) u(t, c) = sample_std_normal(rng);
  Matrix Y(N, T), v(N, T), sigma(N, T);
  std::vector<Matrix> f(J, Matrix(N, T));
  for (int i = 0; i < N; ++i)
    for (int t = 0; t < T; ++t) {
      Y(i, t) = sample_std_normal(rng);
      v(i, t) = sample_exponential_mean(1.0, rng);
      sigma(i, t) = 0.5 + sample_exponential_mean(1.0, rng);
      for (int j = 0; j < J; ++j) f[j](i, t) = sample_std_normal(rng);
    }
  const auto k = mixture_constants(QuantileLevel{0.3});
  const double base = fdrqs_observation_log_density(Y, loadings, u, v, f, sigma, k);

  Matrix G(L, L);
  for (int r = 0; r < L; ++r)
    for (int c = 0; c < L; ++c) G(r, c) = sample_std_normal(rng);
  const Matrix R = Eigen::HouseholderQR<Matrix>(G).householderQ();
  auto rl = loadings;
  Matrix ru = u;
  for (int j = 0; j <= J; ++j) {
    rl[j] = loadings[j] * R;
    ru.middleCols(j * L, L) = u.middleCols(j * L, L) * R;  // rows are u_tj', so u_tj -> R' u_tj
  }
  EXPECT_NEAR(fdrqs_observation_log_density(Y, rl, ru, v, f, sigma, k), base, 1e-10);
}

TEST(Fdrqs, FixedLoadingsTrackTrueWeights) {
  // Simulated from the model itself: v, f drawn first, then the factor walk
  // uses the discount-implied evolution covariances for that design. A single
  // path has strongly autocorrelated misses, so coverage is pooled over replicates.
  const int N = 2, T = 100, J = 1, L = 1, reps = 5;
  const QuantileLevel tau{0.5};
  const auto k = mixture_constants(tau);
  const double sigma = 0.1;
  std::vector<Matrix> loadings{Matrix(N, L), Matrix(N, L)};
  loadings[0] << 1.0, 0.5;
  loadings[1] << 1.0, 2.0;
  auto cfg = FdrqsConfig::defaults(tau, N, J, L);
  cfg.fixed_loadings = loadings;
  cfg.C0 = 0.1 * Matrix::Identity(2, 2);
  Rng rng(314);
  int covered = 0, total = 0;
  for (int rep = 0; rep < reps; ++rep) {
    Panel panel{Matrix(N, T), {}};
    std::vector<Matrix> design(T, Matrix(N, 2));
    std::vector<Vector> obs_var(T, Vector(N)), offset(T, Vector(N));
    for (int i = 0; i < N; ++i) panel.agents.push_back({Matrix(T, J), Matrix::Constant(T, J, 1e-4)});
    for (int t = 0; t < T; ++t) {
      for (int i = 0; i < N; ++i) {
        panel.agents[i].mean(t, 0) = 2.0 + 2.0 * std::sin(0.3 * t + i) + 0.5 * sample_std_normal(rng);
        const double f = panel.agents[i].mean(t, 0) + 1e-2 * sample_std_normal(rng);
        const double v = sample_exponential_mean(sigma, rng);
        design[t](i, 0) = loadings[0](i, 0);
        design[t](i, 1) = f * loadings[1](i, 0);
        offset[t](i) = k.kappa1 * v;
        obs_var[t](i) = k.kappa2 * sigma * v;
      }
    }
    const auto W = oracle::discount_evolution(design, obs_var, cfg.C0, cfg.delta);
    Matrix u(T, 2);
    Vector state = cfg.m0 + cfg.C0.llt().matrixL() * Vector{{sample_std_normal(rng), sample_std_normal(rng)}};
    for (int t = 0; t < T; ++t) {
      state += W[t].llt().matrixL() * Vector{{sample_std_normal(rng), sample_std_normal(rng)}};
      u.row(t) = state.transpose();
      for (int i = 0; i < N; ++i)
        panel.Y(i, t) = offset[t](i) + design[t].row(i).dot(state) + std::sqrt(obs_var[t](i)) * sample_std_normal(rng);
    }

    const auto post = gibbs_fdrqs(panel.Y, panel.agents, cfg, {1000, 500, true}, rng);
    for (int i = 0; i < N; ++i) {
      for (int t = 0; t < T; ++t) {
        std::vector<double> xs;
        for (const auto& d : post.draws) xs.push_back(d.theta[1](i, t));
        std::sort(xs.begin(), xs.end());
        const double truth = loadings[1](i, 0) * u(t, 1);
        if (truth >= empirical_quantile_sorted(xs, 0.025) && truth <= empirical_quantile_sorted(xs, 0.975)) ++covered;
        ++total;
      }
    }
  }
  EXPECT_GE(static_cast<double>(covered) / total, 0.90);
}

TEST(Fdrqs, RejectsTooManyFactors) {
  Rng rng(1);
  const auto panel = random_panel(2, 5, 1, rng);
  auto cfg = FdrqsConfig::defaults(QuantileLevel{0.5}, 2, 1, 2);
  EXPECT_THROW(gibbs_fdrqs(panel.Y, panel.agents, cfg, {5, 0, true}, rng), ConfigError);
}

namespace {

FdrqsPosterior constructed_posterior(int N, int J, int L, const std::vector<Matrix>& loadings, const Vector& u_T,
                                     const Matrix& C_T, double delta, int D) {
  FdrqsPosterior post;
  post.config = FdrqsConfig::defaults(QuantileLevel{0.5}, N, J, L);
  post.config.delta = delta;
  for (int d = 0; d < D; ++d) {
    PanelDraw pd;
    pd.factors.loadings = loadings;
    pd.terminal = {u_T, C_T, Vector::Ones(N), Vector::Constant(N, 40.0)};
    post.draws.push_back(pd);
  }
  return post;
}

}  // namespace

TEST(FdrqsForecast, AgentsIgnoredWhenAgentLoadingsVanish) {
  const int N = 3, J = 2, L = 2;
  Rng rng(2);
  std::vector<Matrix> loadings(J + 1, Matrix::Zero(N, L));
  loadings[0] << 1.0, 0.2, 0.5, -0.3, 0.9, 1.1;
  Vector u = Vector::Ones(L * (J + 1));
  const auto post = constructed_posterior(N, J, L, loadings, u, Matrix::Identity(u.size(), u.size()), 0.9, 200);
  Matrix a1 = Matrix::Zero(N, J), a2 = Matrix::Constant(N, J, 25.0), A = Matrix::Constant(N, J, 0.5);
  Rng r1(7), r2(7);
  const auto f1 = forecast_fdrqs(post, a1, A, r1);
  const auto f2 = forecast_fdrqs(post, a2, A, r2);
  EXPECT_EQ((f1.joint - f2.joint).cwiseAbs().maxCoeff(), 0.0);
  for (int i = 0; i < N; ++i) EXPECT_EQ(f1.series[i].point, f2.series[i].point);
}

TEST(FdrqsForecast, DiagonalStructureGivesIndependentSeries) {
  const int N = 3, J = 1, L = 3, D = 20000;
  std::vector<Matrix> loadings(J + 1, Matrix::Identity(N, L));
  Vector u = Vector::Constant(L * (J + 1), 0.5);
  Matrix C = Matrix::Zero(u.size(), u.size());
  C.diagonal() << 1.0, 2.0, 0.5, 0.3, 0.8, 1.5;
  const auto post = constructed_posterior(N, J, L, loadings, u, C, 0.8, D);
  Rng rng(5);
  const auto f = forecast_fdrqs(post, Matrix::Constant(N, J, 1.0), Matrix::Constant(N, J, 0.4), rng);
  const Matrix centred = f.joint.rowwise() - f.joint.colwise().mean();
  const Matrix cov = centred.transpose() * centred / (D - 1.0);
  for (int a = 0; a < N; ++a)
    for (int b = a + 1; b < N; ++b) {
      const double rho = cov(a, b) / std::sqrt(cov(a, a) * cov(b, b));
      EXPECT_LT(std::abs(rho), 3.0 / std::sqrt(static_cast<double>(D)));
    }
}

TEST(FdrqsForecast, MissingAgentForecastRejected) {
  std::vector<Matrix> loadings(2, Matrix::Ones(2, 1));
  const auto post = constructed_posterior(2, 1, 1, loadings, Vector::Ones(2), Matrix::Identity(2, 2), 0.9, 10);
  Rng rng(1);
  EXPECT_THROW(forecast_fdrqs(post, Matrix::Ones(1, 1), Matrix::Ones(1, 1), rng), std::invalid_argument);
}

TEST(FdrqsForecast, SingleSeriesReducesToDrqs) {
  // N=1, L=1 with unit loadings: theta_t = u_t. With beta = 1 and a DRQS prior
  // covariance matched at unit scale, both samplers target the same model up
  // to the prior on theta_0, which the data swamp.
  const int T = 200, J = 1;
  const QuantileLevel tau{0.5};
  Rng sim(17);
  Vector y(T);
  AgentInputs in{Matrix(T, J), Matrix::Constant(T, J, 0.2)};
  for (int t = 0; t < T; ++t) {
    in.mean(t, 0) = 1.0 + 2.0 * std::sin(0.1 * t) + 0.3 * sample_std_normal(sim);
    y(t) = 0.3 + 0.8 * (in.mean(t, 0) + std::sqrt(0.2) * sample_std_normal(sim)) + sample_al(tau, 0.5, sim);
  }
  const double delta = 0.97;

  auto fcfg = FdrqsConfig::defaults(tau, 1, J, 1);
  fcfg.fixed_loadings = {Matrix::Ones(1, 1), Matrix::Ones(1, 1)};
  fcfg.m0 << 0.0, 1.0;
  fcfg.C0 = 100.0 * Matrix::Identity(2, 2);
  fcfg.n0 << 1.0;
  fcfg.s0 << 1.0;
  fcfg.beta << 1.0;
  fcfg.delta = delta;

  auto dcfg = DrqsConfig::defaults(tau, J);
  dcfg.prior = {fcfg.m0, fcfg.C0 * fcfg.s0(0), fcfg.n0(0), fcfg.s0(0)};
  dcfg.discount = {delta, 1.0};

  const McmcConfig mcmc{3000, 1000, false};
  Rng r1(100), r2(200);
  const auto fpost = gibbs_fdrqs(y.transpose(), {in}, fcfg, mcmc, r1);
  const auto dpost = gibbs_drqs(y, in, dcfg, mcmc, r2);
  const Matrix a = Matrix::Constant(1, 1, 1.5), A = Matrix::Constant(1, 1, 0.2);
  const auto ff = forecast_fdrqs(fpost, a, A, r1);
  const auto df = forecast_drqs(dpost, a.row(0).transpose(), A.row(0).transpose(), r2);
  EXPECT_LT(oracle::ks_two_sample(ff.series[0].draws, df.draws), 0.05);
}
