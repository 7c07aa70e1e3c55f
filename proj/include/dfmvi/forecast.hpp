#pragma once

#include <algorithm>
#include <cmath>
#include <cstdint>
#include <functional>
#include <limits>
#include <string>
#include <vector>

#include <Eigen/Dense>
#include <boost/math/distributions/chi_squared.hpp>
#include <boost/math/distributions/normal.hpp>
#include <boost/math/distributions/students_t.hpp>
#include "json.hpp"

#include "dfmvi/errors.hpp"
#include "dfmvi/gibbs.hpp"
#include "dfmvi/linalg.hpp"
#include "dfmvi/model.hpp"
#include "dfmvi/random.hpp"
#include "dfmvi/statespace.hpp"
#include "dfmvi/vi.hpp"

namespace dfmvi {

/// D x H x n predicted observations; H is the number of horizons (or T for in-sample).
struct PredictiveDraws {
  std::string source;  // "SMF" or "MCMC"
  std::uint64_t seed = 0;
  int D = 0, H = 0, n = 0;
  std::vector<double> values;

  double& at(int d, int h, int i) { return values[(static_cast<std::size_t>(d) * H + h) * n + i]; }
  double at(int d, int h, int i) const { return values[(static_cast<std::size_t>(d) * H + h) * n + i]; }
};

/// Fitted variational posterior with its state pass.
struct SmfPosterior {
  ModelSpec spec;
  VariationalState q;
  StatePass pass;
};

/// One draw of theta from q(theta).
inline ThetaDraw sample_theta_variational(const VariationalState& q, const ModelSpec& spec, Rng& rng) {
  const int n = spec.n, r = spec.r, s = spec.s();
  ThetaDraw th;
  th.Lambda = MatrixXd::Zero(n, s);
  th.sigma2.resize(n);
  for (int i = 0; i < n; ++i) {
    th.sigma2(i) = rng.scaled_inv_chi_squared(q.loadings.nu_sigma(i), q.loadings.tau2_sigma(i));
    std::vector<int> K;
    for (int k = 0; k < s; ++k)
      if (q.loadings.Sigma[i](k, k) > 0.0) K.push_back(k);
    if (K.empty()) continue;
    auto llt = linalg::cholesky(linalg::select(q.loadings.Sigma[i], K), "Sigma_lambda");
    VectorXd z = llt.matrixL() * rng.normal_vector(K.size());
    for (std::size_t a = 0; a < K.size(); ++a)
      th.Lambda(i, K[a]) = q.loadings.mu[i](K[a]) + std::sqrt(th.sigma2(i)) * z(a);
  }
  auto lp = linalg::cholesky(q.transition.Sigma_phi, "Sigma_phi");
  MatrixXd Z = rng.normal_matrix(r, s);
  th.Phi = q.transition.M_phi + Z * lp.matrixL().transpose();
  return th;
}

/// Predictive draws of the in-sample observations at time index t (0-based row),
/// one row per draw. Draw d uses theta[d]; the state comes from `state(d)`.
inline MatrixXd predictive_slice(const std::vector<ThetaDraw>& theta,
                                 const std::function<VectorXd(int, Rng&)>& state, std::uint64_t seed, int t) {
  const int D = static_cast<int>(theta.size());
  const int n = D ? static_cast<int>(theta.front().sigma2.size()) : 0;
  Rng rng(derive_seed(seed, 1000003ULL + static_cast<std::uint64_t>(t)));
  MatrixXd out(D, n);
  for (int d = 0; d < D; ++d) {
    VectorXd F = state(d, rng);
    for (int i = 0; i < n; ++i)
      out(d, i) = theta[d].Lambda.row(i).dot(F) + std::sqrt(theta[d].sigma2(i)) * rng.normal();
  }
  return out;
}

inline std::vector<ThetaDraw> smf_theta_draws(const SmfPosterior& post, int D, std::uint64_t seed) {
  std::vector<ThetaDraw> out(D);
  for (int d = 0; d < D; ++d) {
    Rng rng(derive_seed(seed, static_cast<std::uint64_t>(d)));
    out[d] = sample_theta_variational(post.q, post.spec, rng);
  }
  return out;
}

inline std::vector<ThetaDraw> mcmc_theta_draws(const DrawStore& store) {
  std::vector<ThetaDraw> out;
  out.reserve(store.draws.size());
  for (const auto& d : store.draws) out.push_back(d.theta);
  return out;
}

/// In-sample slice at row t from the variational posterior: F_t from its smoothed marginal.
inline MatrixXd smf_in_sample_slice(const SmfPosterior& post, const std::vector<ThetaDraw>& theta,
                                    std::uint64_t seed, int t) {
  const auto& mean = post.pass.moments.mean[t + 1];
  const auto llt = linalg::cholesky(post.pass.moments.cov[t + 1], "smoothed covariance");
  const MatrixXd L = llt.matrixL();
  return predictive_slice(theta, [&](int, Rng& rng) { return VectorXd(mean + L * rng.normal_vector(mean.size())); },
                          seed, t);
}

inline MatrixXd mcmc_in_sample_slice(const DrawStore& store, const std::vector<ThetaDraw>& theta,
                                     std::uint64_t seed, int t) {
  return predictive_slice(theta, [&](int d, Rng&) { return VectorXd(store.draws[d].F.row(t + 1).transpose()); },
                          seed, t);
}

inline PredictiveDraws draw_in_sample_smf(const SmfPosterior& post, int T, int D, std::uint64_t seed) {
  if (D < 1) throw DomainError("number of draws must be >= 1");
  PredictiveDraws out{"SMF", seed, D, T, post.spec.n, {}};
  out.values.resize(static_cast<std::size_t>(D) * T * post.spec.n);
  const auto theta = smf_theta_draws(post, D, seed);
  for (int t = 0; t < T; ++t) {
    MatrixXd sl = smf_in_sample_slice(post, theta, seed, t);
    for (int d = 0; d < D; ++d)
      for (int i = 0; i < post.spec.n; ++i) out.at(d, t, i) = sl(d, i);
  }
  return out;
}

inline PredictiveDraws draw_in_sample_mcmc(const DrawStore& store, std::uint64_t seed) {
  const int D = static_cast<int>(store.draws.size());
  if (D < 1) throw DomainError("draw store is empty");
  PredictiveDraws out{"MCMC", seed, D, store.T, store.spec.n, {}};
  out.values.resize(static_cast<std::size_t>(D) * store.T * store.spec.n);
  const auto theta = mcmc_theta_draws(store);
  for (int t = 0; t < store.T; ++t) {
    MatrixXd sl = mcmc_in_sample_slice(store, theta, seed, t);
    for (int d = 0; d < D; ++d)
      for (int i = 0; i < store.spec.n; ++i) out.at(d, t, i) = sl(d, i);
  }
  return out;
}

namespace detail {

inline void iterate_forecast(PredictiveDraws& out, int d, const ThetaDraw& th, VectorXd F, const ModelSpec& spec,
                             Rng& rng) {
  const MatrixXd Mt = companion(th.Phi, spec.r, spec.p);
  for (int h = 0; h < out.H; ++h) {
    VectorXd next = Mt * F;
    next.head(spec.r) += rng.normal_vector(spec.r);
    F = std::move(next);
    for (int i = 0; i < spec.n; ++i)
      out.at(d, h, i) = th.Lambda.row(i).dot(F) + std::sqrt(th.sigma2(i)) * rng.normal();
  }
}

}  // namespace detail

/// h = 1..H step-ahead predictive draws from the variational posterior. The terminal
/// state comes from a backward-sampled path of q(F) (joint_path) or its marginal at T.
inline PredictiveDraws draw_out_of_sample_smf(const SmfPosterior& post, int H, int D, std::uint64_t seed,
                                              bool joint_path = true) {
  if (H < 1) throw DomainError("horizon must be >= 1");
  if (D < 1) throw DomainError("number of draws must be >= 1");
  const auto& spec = post.spec;
  PredictiveDraws out{"SMF", seed, D, H, spec.n, {}};
  out.values.resize(static_cast<std::size_t>(D) * H * spec.n);
  const int T = post.pass.moments.T();
  const auto& mT = post.pass.moments.mean[T];
  const MatrixXd LT = linalg::cholesky(post.pass.moments.cov[T], "terminal state covariance").matrixL();
  for (int d = 0; d < D; ++d) {
    Rng rng(derive_seed(seed, 2000003ULL + static_cast<std::uint64_t>(d)));
    ThetaDraw th = sample_theta_variational(post.q, spec, rng);
    VectorXd FT;
    if (joint_path) {
      FT = backward_sample(post.pass.filter, post.pass.params.M_tilde, spec.r, rng)[T];
    } else {
      FT = mT + LT * rng.normal_vector(mT.size());
    }
    detail::iterate_forecast(out, d, th, FT, spec, rng);
  }
  return out;
}

inline PredictiveDraws draw_out_of_sample_mcmc(const DrawStore& store, int H, std::uint64_t seed) {
  if (H < 1) throw DomainError("horizon must be >= 1");
  const int D = static_cast<int>(store.draws.size());
  if (D < 1) throw DomainError("draw store is empty");
  PredictiveDraws out{"MCMC", seed, D, H, store.spec.n, {}};
  out.values.resize(static_cast<std::size_t>(D) * H * store.spec.n);
  for (int d = 0; d < D; ++d) {
    Rng rng(derive_seed(seed, 2000003ULL + static_cast<std::uint64_t>(d)));
    VectorXd FT = store.draws[d].F.row(store.T).transpose();
    detail::iterate_forecast(out, d, store.draws[d].theta, FT, store.spec, rng);
  }
  return out;
}

struct ErrorSummary {
  double me = 0.0, mae = 0.0, rmse = 0.0;
  std::size_t count = 0;
};

inline ErrorSummary posterior_mean_errors(const std::vector<double>& a, const std::vector<double>& b) {
  if (a.size() != b.size()) throw StructuralError("posterior mean blocks differ in size");
  if (a.empty()) throw DomainError("empty block");
  ErrorSummary e;
  e.count = a.size();
  for (std::size_t k = 0; k < a.size(); ++k) {
    const double d = a[k] - b[k];
    e.me += d;
    e.mae += std::abs(d);
    e.rmse += d * d;
  }
  const double N = static_cast<double>(a.size());
  e.me /= N;
  e.mae /= N;
  e.rmse = std::sqrt(e.rmse / N);
  return e;
}

/// Equal-tailed sample quantile with linear interpolation between order statistics.
inline double sample_quantile(std::vector<double>& v, double prob) {
  if (v.empty()) throw DomainError("quantile of an empty sample");
  const double pos = prob * static_cast<double>(v.size() - 1);
  const std::size_t lo = static_cast<std::size_t>(std::floor(pos));
  const std::size_t hi = std::min(lo + 1, v.size() - 1);
  std::nth_element(v.begin(), v.begin() + lo, v.end());
  const double a = v[lo];
  const double b = hi == lo ? a : *std::min_element(v.begin() + lo + 1, v.end());
  return a + (pos - static_cast<double>(lo)) * (b - a);
}

struct Interval {
  double lo = -std::numeric_limits<double>::infinity();
  double hi = std::numeric_limits<double>::infinity();
};

inline Interval empirical_interval(std::vector<double> draws, double level) {
  const double tail = 0.5 * (1.0 - level / 100.0);
  Interval iv;
  iv.lo = sample_quantile(draws, tail);
  iv.hi = sample_quantile(draws, 1.0 - tail);
  return iv;
}

/// Percent of draws inside [lo, hi].
inline double coverage_percent(const Interval& iv, const std::vector<double>& draws) {
  if (draws.empty()) throw DomainError("empty draw set");
  std::size_t inside = 0;
  for (double x : draws)
    if (x >= iv.lo && x <= iv.hi) ++inside;
  return 100.0 * static_cast<double>(inside) / static_cast<double>(draws.size());
}

/// Analytic variational marginal intervals.
inline Interval normal_interval(double mean, double sd, double level) {
  if (!(sd > 0.0)) return {mean, mean};
  boost::math::normal_distribution<double> nd(mean, sd);
  const double tail = 0.5 * (1.0 - level / 100.0);
  return {boost::math::quantile(nd, tail), boost::math::quantile(nd, 1.0 - tail)};
}

/// lambda_ik marginal: mu + sqrt(tau2 Sigma_kk) t_nu.
inline Interval student_interval(double mean, double scale, double dof, double level) {
  if (!(scale > 0.0)) return {mean, mean};
  boost::math::students_t_distribution<double> td(dof);
  const double q = boost::math::quantile(td, 1.0 - 0.5 * (1.0 - level / 100.0));
  return {mean - q * scale, mean + q * scale};
}

/// Scaled-Inv-chi2(nu, tau2): x = nu tau2 / chi2_nu.
inline Interval sinvchi2_interval(double nu, double tau2, double level) {
  boost::math::chi_squared_distribution<double> cd(nu);
  const double tail = 0.5 * (1.0 - level / 100.0);
  return {nu * tau2 / boost::math::quantile(cd, 1.0 - tail), nu * tau2 / boost::math::quantile(cd, tail)};
}

struct CoverageStats {
  double mean = 0.0, median = 0.0, stdev = 0.0;
};

inline CoverageStats summarize(std::vector<double> v) {
  CoverageStats c;
  if (v.empty()) return c;
  double sum = 0.0;
  for (double x : v) sum += x;
  c.mean = sum / static_cast<double>(v.size());
  double ss = 0.0;
  for (double x : v) ss += (x - c.mean) * (x - c.mean);
  c.stdev = v.size() > 1 ? std::sqrt(ss / static_cast<double>(v.size() - 1)) : 0.0;
  std::sort(v.begin(), v.end());
  const std::size_t m = v.size() / 2;
  c.median = v.size() % 2 ? v[m] : 0.5 * (v[m - 1] + v[m]);
  return c;
}

inline const std::vector<double>& default_levels() {
  static const std::vector<double> levels = {50.0, 75.0, 95.0};
  return levels;
}

/// One compared element: posterior means and coverage per level.
struct ElementRow {
  std::string block;
  std::string name;
  double smf_mean = 0.0;
  double mcmc_mean = 0.0;
  std::vector<double> coverage;  // one per level
};

struct BlockReport {
  std::string block;
  ErrorSummary errors;
  std::vector<CoverageStats> coverage;  // one per level
  std::vector<ElementRow> rows;
};

struct ComparisonReport {
  std::vector<double> levels;
  std::vector<BlockReport> blocks;

  const BlockReport& block(const std::string& name) const {
    for (const auto& b : blocks)
      if (b.block == name) return b;
    throw DomainError("no block named " + name);
  }
};

inline BlockReport finish_block(std::string name, std::vector<ElementRow> rows, std::size_t n_levels) {
  BlockReport b;
  b.block = std::move(name);
  std::vector<double> a, m;
  std::vector<std::vector<double>> cov(n_levels);
  for (const auto& r : rows) {
    a.push_back(r.smf_mean);
    m.push_back(r.mcmc_mean);
    for (std::size_t l = 0; l < n_levels; ++l) cov[l].push_back(r.coverage[l]);
  }
  b.errors = posterior_mean_errors(a, m);
  for (auto& c : cov) b.coverage.push_back(summarize(std::move(c)));
  b.rows = std::move(rows);
  return b;
}

struct CompareOptions {
  std::vector<double> levels = default_levels();
  int smf_draws = 10000;
  int horizons = 4;
  std::uint64_t seed = 1;
};

/// Compares the variational posterior against MCMC draws block by block:
/// loadings, idiosyncratic variances, transition, factors, in-sample predictions
/// and h-step predictions. Parameter and factor intervals use the analytic
/// variational marginals; prediction intervals use variational draws.
inline ComparisonReport compare_posteriors(const SmfPosterior& post, const DrawStore& store,
                                           const CompareOptions& opt = {}) {
  const auto& spec = post.spec;
  if (!(store.spec == spec)) throw StructuralError("model dimensions differ between posteriors");
  if (store.T != post.pass.moments.T()) throw StructuralError("panel length differs between posteriors");
  if (store.draws.empty()) throw DomainError("draw store is empty");
  const int n = spec.n, r = spec.r, s = spec.s(), T = store.T;
  const std::size_t L = opt.levels.size();
  const double D = static_cast<double>(store.draws.size());
  ComparisonReport rep;
  rep.levels = opt.levels;
  std::vector<double> mc(store.draws.size());

  auto analytic_row = [&](std::string block, std::string name, double smf_mean,
                          const std::function<Interval(double)>& interval,
                          const std::function<double(const Draw&)>& get) {
    ElementRow row{std::move(block), std::move(name), smf_mean, 0.0, {}};
    for (std::size_t d = 0; d < store.draws.size(); ++d) mc[d] = get(store.draws[d]);
    double sum = 0.0;
    for (double x : mc) sum += x;
    row.mcmc_mean = sum / D;
    for (double lv : opt.levels) row.coverage.push_back(coverage_percent(interval(lv), mc));
    return row;
  };

  const auto& Lq = post.q.loadings;
  {
    std::vector<ElementRow> rows;
    for (int i = 0; i < n; ++i)
      for (int k = 0; k < s; ++k) {
        if (!(Lq.Sigma[i](k, k) > 0.0)) continue;  // zero-restricted
        const double scale = std::sqrt(Lq.tau2_sigma(i) * Lq.Sigma[i](k, k));
        rows.push_back(analytic_row(
            "loadings", "lambda_" + std::to_string(i) + "_" + std::to_string(k), Lq.mu[i](k),
            [&](double lv) { return student_interval(Lq.mu[i](k), scale, Lq.nu_sigma(i), lv); },
            [&](const Draw& d) { return d.theta.Lambda(i, k); }));
      }
    rep.blocks.push_back(finish_block("loadings", std::move(rows), L));
  }
  {
    std::vector<ElementRow> rows;
    for (int i = 0; i < n; ++i) {
      const double nu = Lq.nu_sigma(i), t2 = Lq.tau2_sigma(i);
      const double mean = nu > 2.0 ? nu * t2 / (nu - 2.0) : std::numeric_limits<double>::quiet_NaN();
      rows.push_back(analytic_row(
          "sigma2", "sigma2_" + std::to_string(i), mean, [&](double lv) { return sinvchi2_interval(nu, t2, lv); },
          [&](const Draw& d) { return d.theta.sigma2(i); }));
    }
    rep.blocks.push_back(finish_block("sigma2", std::move(rows), L));
  }
  {
    std::vector<ElementRow> rows;
    const auto& Tq = post.q.transition;
    for (int a = 0; a < r; ++a)
      for (int j = 0; j < s; ++j) {
        const double sd = std::sqrt(Tq.Sigma_phi(j, j));
        rows.push_back(analytic_row(
            "transition", "phi_" + std::to_string(a) + "_" + std::to_string(j), Tq.M_phi(a, j),
            [&](double lv) { return normal_interval(Tq.M_phi(a, j), sd, lv); },
            [&](const Draw& d) { return d.theta.Phi(a, j); }));
      }
    rep.blocks.push_back(finish_block("transition", std::move(rows), L));
  }
  {
    std::vector<ElementRow> rows;
    const auto& M = post.pass.moments;
    for (int t = 1; t <= T; ++t)
      for (int k = 0; k < r; ++k) {
        const double sd = std::sqrt(M.cov[t](k, k));
        rows.push_back(analytic_row(
            "factors", "f_" + std::to_string(t) + "_" + std::to_string(k), M.mean[t](k),
            [&](double lv) { return normal_interval(M.mean[t](k), sd, lv); },
            [&](const Draw& d) { return d.F(t, k); }));
      }
    rep.blocks.push_back(finish_block("factors", std::move(rows), L));
  }
  {
    // In-sample predictions, one time step at a time. The MCMC posterior mean is
    // the average of lambda_i' F_t over draws (noise integrated out).
    std::vector<ElementRow> rows;
    const auto smf_theta = smf_theta_draws(post, opt.smf_draws, opt.seed);
    const auto mc_theta = mcmc_theta_draws(store);
    const MatrixXd ML = Lq.M_Lambda();
    std::vector<double> col_smf(opt.smf_draws), col_mc(store.draws.size());
    for (int t = 0; t < T; ++t) {
      MatrixXd a = smf_in_sample_slice(post, smf_theta, opt.seed, t);
      MatrixXd b = mcmc_in_sample_slice(store, mc_theta, opt.seed, t);
      for (int i = 0; i < n; ++i) {
        ElementRow row{"insample", "y_" + std::to_string(t + 1) + "_" + std::to_string(i),
                       ML.row(i).dot(post.pass.moments.mean[t + 1]), 0.0, {}};
        double sum = 0.0;
        for (std::size_t d = 0; d < store.draws.size(); ++d)
          sum += store.draws[d].theta.Lambda.row(i).dot(store.draws[d].F.row(t + 1));
        row.mcmc_mean = sum / D;
        for (int d = 0; d < opt.smf_draws; ++d) col_smf[d] = a(d, i);
        for (std::size_t d = 0; d < store.draws.size(); ++d) col_mc[d] = b(d, i);
        for (double lv : opt.levels) row.coverage.push_back(coverage_percent(empirical_interval(col_smf, lv), col_mc));
        rows.push_back(std::move(row));
      }
    }
    rep.blocks.push_back(finish_block("insample", std::move(rows), L));
  }
  if (opt.horizons > 0) {
    auto a = draw_out_of_sample_smf(post, opt.horizons, opt.smf_draws, opt.seed);
    auto b = draw_out_of_sample_mcmc(store, opt.horizons, opt.seed);
    for (int h = 0; h < opt.horizons; ++h) {
      std::vector<ElementRow> rows;
      std::vector<double> col_smf(a.D), col_mc(b.D);
      for (int i = 0; i < n; ++i) {
        double sa = 0.0, sb = 0.0;
        for (int d = 0; d < a.D; ++d) sa += col_smf[d] = a.at(d, h, i);
        for (int d = 0; d < b.D; ++d) sb += col_mc[d] = b.at(d, h, i);
        ElementRow row{"h" + std::to_string(h + 1), "y_T+" + std::to_string(h + 1) + "_" + std::to_string(i),
                       sa / a.D, sb / b.D, {}};
        for (double lv : opt.levels) row.coverage.push_back(coverage_percent(empirical_interval(col_smf, lv), col_mc));
        rows.push_back(std::move(row));
      }
      rep.blocks.push_back(finish_block("h" + std::to_string(h + 1), std::move(rows), L));
    }
  }
  return rep;
}

inline nlohmann::json report_to_json(const ComparisonReport& rep) {
  nlohmann::json j;
  j["levels"] = rep.levels;
  auto blocks = nlohmann::json::object();
  for (const auto& b : rep.blocks) {
    nlohmann::json jb;
    jb["elements"] = b.rows.size();
    jb["ME"] = b.errors.me;
    jb["MAE"] = b.errors.mae;
    jb["RMSE"] = b.errors.rmse;
    auto cov = nlohmann::json::object();
    for (std::size_t l = 0; l < rep.levels.size(); ++l) {
      cov[detail::format_double(rep.levels[l])] = {
          {"mean", b.coverage[l].mean}, {"median", b.coverage[l].median}, {"stdev", b.coverage[l].stdev}};
    }
    jb["coverage"] = cov;
    blocks[b.block] = jb;
  }
  j["blocks"] = blocks;
  return j;
}

inline void write_report_csv(const BlockReport& b, const std::vector<double>& levels, const std::string& path) {
  std::ofstream out(path);
  if (!out) throw ParseError("cannot write report: " + path);
  out << "block,element,smf_mean,mcmc_mean,error";
  for (double lv : levels) out << ",coverage_" << detail::format_double(lv);
  out << '\n';
  for (const auto& r : b.rows) {
    out << r.block << ',' << r.name << ',' << detail::format_double(r.smf_mean) << ','
        << detail::format_double(r.mcmc_mean) << ',' << detail::format_double(r.smf_mean - r.mcmc_mean);
    for (double c : r.coverage) out << ',' << detail::format_double(c);
    out << '\n';
  }
}

}  // namespace dfmvi
