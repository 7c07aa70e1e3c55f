#pragma once

#include <algorithm>
#include <chrono>
#include <cmath>
#include <numbers>
#include <optional>
#include <string>
#include <vector>

#include <Eigen/Dense>
#include <boost/math/special_functions/digamma.hpp>
#include "json.hpp"

#include "dfmvi/errors.hpp"
#include "dfmvi/linalg.hpp"
#include "dfmvi/model.hpp"
#include "dfmvi/panel.hpp"
#include "dfmvi/random.hpp"
#include "dfmvi/statespace.hpp"

namespace dfmvi {

/// q(lambda_i, sigma2_i) = N(mu_i, sigma2_i Sigma_i) x Scaled-Inv-chi2(nu_sigma_i, tau2_sigma_i).
/// Zero-restricted loadings have mu = 0 and zero rows/columns in Sigma.
struct LoadingsVariational {
  std::vector<VectorXd> mu;
  std::vector<MatrixXd> Sigma;
  VectorXd nu_sigma;
  VectorXd tau2_sigma;

  int n() const { return static_cast<int>(mu.size()); }

  MatrixXd M_Lambda() const {
    const Eigen::Index s = mu.empty() ? 0 : mu.front().size();
    MatrixXd M(mu.size(), s);
    for (std::size_t i = 0; i < mu.size(); ++i) M.row(i) = mu[i].transpose();
    return M;
  }

  VectorXd Psi_inv() const { return tau2_sigma.cwiseInverse(); }
};

/// q(Phi) = MN(M_phi, I_r, Sigma_phi).
struct TransitionVariational {
  MatrixXd M_phi;      // r x s
  MatrixXd Sigma_phi;  // s x s
};

struct VariationalState {
  LoadingsVariational loadings;
  TransitionVariational transition;
};

/// Prior with zero-restricted coordinates removed, one entry per equation.
struct EquationPrior {
  std::vector<int> free;
  MatrixXd V_inv;   // restricted precision
  MatrixXd V;       // its inverse
  double logdet_V = 0.0;
};

inline std::vector<EquationPrior> equation_priors(const PriorSpec& prior, const ModelSpec& spec,
                                                  const Identification& id) {
  auto free = id.free_indices(spec);
  std::vector<EquationPrior> out(spec.n);
  // Equations sharing a free set share the factorization.
  for (int i = 0; i < spec.n; ++i) {
    bool reused = false;
    for (int j = 0; j < i; ++j)
      if (free[j] == free[i]) {
        out[i] = out[j];
        reused = true;
        break;
      }
    if (reused) continue;
    out[i].free = free[i];
    out[i].V_inv = linalg::select(prior.V_inv, free[i]);
    out[i].V = linalg::spd_inverse(out[i].V_inv, "prior loading precision");
    out[i].logdet_V = -linalg::spd_logdet(out[i].V_inv, "prior loading precision");
  }
  return out;
}

/// Coordinate update of q(Lambda, Sigma_eps) given the current state moments.
inline LoadingsVariational update_loadings(const TimeSeriesPanel& panel, const StateMoments& moments,
                                           const PriorSpec& prior, const std::vector<EquationPrior>& eq) {
  const int n = static_cast<int>(panel.n());
  const int T = static_cast<int>(panel.T());
  const Eigen::Index s = prior.V_inv.rows();
  if (moments.T() != T) throw StructuralError("state moments do not match panel length");
  LoadingsVariational out;
  out.mu.assign(n, VectorXd::Zero(s));
  out.Sigma.assign(n, MatrixXd::Zero(s, s));
  out.nu_sigma.resize(n);
  out.tau2_sigma.resize(n);
  for (int i = 0; i < n; ++i) {
    const auto& K = eq[i].free;
    MatrixXd S = MatrixXd::Zero(s, s);
    VectorXd b = VectorXd::Zero(s);
    double yy = 0.0;
    int Ti = 0;
    for (int t = 0; t < T; ++t) {
      if (!panel.available(t, i)) continue;
      const double y = panel.value(t, i);
      S += moments.second[t + 1];
      b += y * moments.mean[t + 1];
      yy += y * y;
      ++Ti;
    }
    if (Ti == 0) {
      out.Sigma[i] = linalg::scatter(eq[i].V, K, s);
      out.nu_sigma(i) = prior.nu(i);
      out.tau2_sigma(i) = prior.tau2(i);
      continue;
    }
    MatrixXd prec = linalg::select(S, K) + eq[i].V_inv;
    linalg::symmetrize_in_place(prec);
    auto llt = linalg::cholesky(prec, "loading precision of variable " + std::to_string(i));
    MatrixXd SigK = llt.solve(MatrixXd::Identity(K.size(), K.size()));
    linalg::symmetrize_in_place(SigK);
    VectorXd bK = linalg::select(b, K);
    VectorXd muK = llt.solve(bK);
    out.mu[i] = linalg::scatter(muK, K, s);
    out.Sigma[i] = linalg::scatter(SigK, K, s);
    out.nu_sigma(i) = prior.nu(i) + Ti;
    const double tau2 = (prior.nu(i) * prior.tau2(i) + yy - muK.dot(bK)) / out.nu_sigma(i);
    if (!(tau2 > 0.0) || !std::isfinite(tau2))
      throw NumericalError("nonpositive tau2_sigma for variable " + std::to_string(i) +
                           " (state moments are inconsistent)");
    out.tau2_sigma(i) = tau2;
  }
  return out;
}

/// Coordinate update of q(Phi).
inline TransitionVariational update_transition(const StateMoments& moments, const PriorSpec& prior, int r) {
  const Eigen::Index s = prior.W_inv.rows();
  MatrixXd S00 = prior.W_inv;
  MatrixXd S10 = MatrixXd::Zero(r, s);
  for (int t = 1; t <= moments.T(); ++t) {
    S00 += moments.second[t - 1];
    S10 += moments.lag_cross[t];
  }
  linalg::symmetrize_in_place(S00);
  TransitionVariational out;
  out.Sigma_phi = linalg::spd_inverse(S00, "transition precision");
  out.M_phi = S10 * out.Sigma_phi;
  return out;
}

/// Everything produced by one pass over q(F) for a fixed q(theta).
struct StatePass {
  SsmParams params;
  std::vector<MatrixXd> sigma_theta;  // t = 1..T at [t-1]
  FilterOutput filter;
  StateMoments moments;
  std::vector<double> remainder;  // e^S' (Sigma^S)^{-1} e^S at [t-1]
  double logdet_P0 = 0.0;
};

inline StatePass update_states(const TimeSeriesPanel& panel, const VariationalState& q, const PriorSpec& prior,
                               const ModelSpec& spec) {
  const int T = static_cast<int>(panel.T());
  const int r = spec.r;
  const auto avail = availability_summary(panel).available;
  const MatrixXd M = q.loadings.M_Lambda();
  const VectorXd psi_inv = q.loadings.Psi_inv();
  StatePass pass;
  pass.params.r = r;
  pass.params.M_tilde = companion(q.transition.M_phi, r, spec.p);
  MatrixXd P0_inv = linalg::spd_inverse(prior.Sigma_F0, "Sigma_F0") + r * q.transition.Sigma_phi;
  linalg::symmetrize_in_place(P0_inv);
  auto llt0 = linalg::cholesky(P0_inv, "initial state precision");
  pass.params.P0 = llt0.solve(MatrixXd::Identity(spec.s(), spec.s()));
  linalg::symmetrize_in_place(pass.params.P0);
  pass.logdet_P0 = -linalg::logdet(llt0);
  pass.sigma_theta.resize(T);
  pass.params.collapsed.resize(T);
  pass.remainder.assign(T, 0.0);
  for (int t = 0; t < T; ++t) {
    pass.sigma_theta[t] =
        build_sigma_theta(avail[t], q.loadings.Sigma, q.transition.Sigma_phi, r, t == T - 1);
    const VectorXd y = panel.row_zero_filled(t);
    pass.params.collapsed[t] = collapse_observation(y, avail[t], M, psi_inv, pass.sigma_theta[t]);
    if (pass.params.collapsed[t].observed)
      pass.remainder[t] =
          remainder_quadratic(y, avail[t], M, psi_inv, pass.sigma_theta[t], pass.params.collapsed[t].y_star);
  }
  pass.filter = kalman_filter(pass.params);
  pass.moments = kalman_smoother(pass.filter, pass.params.M_tilde, r);
  return pass;
}

struct ElboTerms {
  double F = 0.0;
  double Lambda = 0.0;
  double Phi = 0.0;
  double Sigma = 0.0;
  double total() const { return F + Lambda + Phi + Sigma; }
};

/// Evidence lower bound of q(theta) q(F), where q(F) is the pass computed
/// from this q(theta).
inline ElboTerms compute_elbo(const TimeSeriesPanel& panel, const VariationalState& q, const StatePass& pass,
                              const PriorSpec& prior, const std::vector<EquationPrior>& eq, int r) {
  const int n = static_cast<int>(panel.n());
  const auto counts = availability_summary(panel).counts;
  ElboTerms e;

  const double logdet_F0 = linalg::spd_logdet(prior.Sigma_F0, "Sigma_F0");
  e.F = -0.5 * counts.sum() * std::log(std::numbers::pi) - 0.5 * (logdet_F0 - pass.logdet_P0);
  for (int t = 1; t <= pass.filter.T(); ++t) {
    if (!pass.filter.observed[t]) continue;
    const auto& obs = pass.params.collapsed[t - 1];
    e.F += -0.5 * (pass.filter.logdet_G[t] - obs.logdet_H) - 0.5 * pass.filter.innovation_quad[t] -
           0.5 * pass.remainder[t - 1];
  }

  const auto& L = q.loadings;
  for (int i = 0; i < n; ++i) {
    const auto& K = eq[i].free;
    const MatrixXd SigK = linalg::select(L.Sigma[i], K);
    const VectorXd muK = linalg::select(L.mu[i], K);
    const double k = static_cast<double>(K.size());
    e.Lambda += 0.5 * k - 0.5 * (eq[i].V_inv * SigK).trace() -
                0.5 * muK.dot(eq[i].V_inv * muK) / L.tau2_sigma(i) -
                0.5 * (eq[i].logdet_V - linalg::spd_logdet(SigK, "Sigma_lambda"));
  }

  const auto& Tr = q.transition;
  const double s = static_cast<double>(Tr.Sigma_phi.rows());
  const double logdet_W = -linalg::spd_logdet(prior.W_inv, "W_inv");
  e.Phi = 0.5 * r * s - 0.5 * r * (prior.W_inv * Tr.Sigma_phi).trace() -
          0.5 * (Tr.M_phi * prior.W_inv * Tr.M_phi.transpose()).trace() -
          0.5 * r * (logdet_W - linalg::spd_logdet(Tr.Sigma_phi, "Sigma_phi"));

  for (int i = 0; i < n; ++i) {
    if (std::abs(L.nu_sigma(i) - prior.nu(i) - counts(i)) > 1e-9 * std::max(1.0, L.nu_sigma(i)))
      throw DomainError("nu_sigma must equal nu + T_i for variable " + std::to_string(i));
    const double nus = L.nu_sigma(i), ts = L.tau2_sigma(i);
    const double nu = prior.nu(i), tau2 = prior.tau2(i);
    e.Sigma += std::lgamma(0.5 * nus) - std::lgamma(0.5 * nu) - 0.5 * nus * std::log(nus * ts) +
               0.5 * nu * std::log(nu * tau2) + (nus * ts - nu * tau2) / (2.0 * ts);
  }

  if (!std::isfinite(e.total()))
    throw NumericalError("non-finite ELBO: F=" + std::to_string(e.F) + " Lambda=" + std::to_string(e.Lambda) +
                         " Phi=" + std::to_string(e.Phi) + " Sigma=" + std::to_string(e.Sigma));
  return e;
}

/// E[ln sigma2] under Scaled-Inv-chi2(nu, tau2).
inline double expected_log_sigma2(double nu, double tau2) {
  return std::log(nu * tau2) - std::numbers::ln2 - boost::math::digamma(0.5 * nu);
}

struct FitOptions {
  double tolerance = 1e-7;
  int max_iters = 1000;
  double monotone_slack = 1e-8;
};

struct FitReport {
  std::vector<double> elbo_trace;
  int iterations = 0;
  bool converged = false;
  double criteria = 0.0;
  double wall_seconds = 0.0;
};

struct FitResult {
  VariationalState state;
  StatePass pass;
  ElboTerms elbo;
  FitReport report;
};

namespace detail {

inline void check_fit_inputs(const TimeSeriesPanel& panel, const ModelSpec& spec) {
  spec.validate();
  if (panel.n() != spec.n) throw StructuralError("panel has " + std::to_string(panel.n()) + " columns, spec n = " +
                                                 std::to_string(spec.n));
  if (panel.T() <= spec.p + 1) throw DomainError("panel too short: need T > p + 1");
  if (spec.n < spec.r) warn("fewer variables than factors (n < r)");
}

/// Relative ELBO change between consecutive iterations.
inline double elbo_criteria(double current, double previous) {
  return (current - previous) / (0.5 * (std::abs(current) + std::abs(previous)));
}

}  // namespace detail

/// Flips the sign of individual factors: F -> R F with R = diag(signs) on every lag block.
inline void rotate_signs(VariationalState& q, StateMoments* moments, const std::vector<int>& signs, int p) {
  const int r = static_cast<int>(signs.size());
  const int s = r * (p + 1);
  VectorXd d(s);
  for (int lag = 0; lag <= p; ++lag)
    for (int k = 0; k < r; ++k) d(lag * r + k) = signs[k];
  const auto R = d.asDiagonal();
  VectorXd dr = d.head(r);
  for (auto& mu : q.loadings.mu) mu = R * mu;
  for (auto& S : q.loadings.Sigma) S = R * S * R;
  q.transition.M_phi = dr.asDiagonal() * q.transition.M_phi * R;
  q.transition.Sigma_phi = R * q.transition.Sigma_phi * R;
  if (!moments) return;
  for (int t = 0; t <= moments->T(); ++t) {
    moments->mean[t] = R * moments->mean[t];
    moments->cov[t] = R * moments->cov[t] * R;
    moments->second[t] = R * moments->second[t] * R;
    if (t > 0) {
      moments->lag_cov[t] = R * moments->lag_cov[t] * R;
      moments->lag_cross[t] = dr.asDiagonal() * moments->lag_cross[t] * R;
    }
  }
}

/// Sign of each factor implied by the positivity restrictions (+1 when unrestricted).
inline std::vector<int> identification_signs(const VariationalState& q, const Identification& id, int r) {
  std::vector<int> signs(r, 1);
  for (const auto& rule : id.rules)
    if (rule.sign * q.loadings.mu[rule.variable](rule.factor) < 0.0) signs[rule.factor] = -1;
  return signs;
}

/// Coordinate ascent: state pass from the current q(theta), then q(theta) from
/// the new moments. ELBO_j is evaluated at (q_j(theta), q_j(F)), where q_j(F)
/// comes from the pass run with q_j(theta); the trace starts with the initial state.
inline FitResult fit_smf(const TimeSeriesPanel& panel, const ModelSpec& spec, const PriorSpec& prior_in,
                         const Identification& id, const VariationalState& init, const FitOptions& opt = {}) {
  const auto start = std::chrono::steady_clock::now();
  detail::check_fit_inputs(panel, spec);
  id.validate(spec);
  if (!(opt.tolerance > 0.0)) throw DomainError("tolerance must be positive");
  if (opt.max_iters < 1) throw DomainError("max_iters must be >= 1");
  const PriorSpec prior = validate_prior(prior_in, spec);
  const auto eq = equation_priors(prior, spec, id);

  FitResult res;
  res.state = init;
  res.pass = update_states(panel, res.state, prior, spec);
  res.elbo = compute_elbo(panel, res.state, res.pass, prior, eq, spec.r);
  res.report.elbo_trace.push_back(res.elbo.total());

  for (int it = 1; it <= opt.max_iters; ++it) {
    VariationalState next;
    next.loadings = update_loadings(panel, res.pass.moments, prior, eq);
    next.transition = update_transition(res.pass.moments, prior, spec.r);
    StatePass pass = update_states(panel, next, prior, spec);
    ElboTerms elbo = compute_elbo(panel, next, pass, prior, eq, spec.r);
    const double prev = res.report.elbo_trace.back();
    const double cur = elbo.total();
    const double crit = detail::elbo_criteria(cur, prev);
    if (crit < -opt.monotone_slack)
      throw NumericalError("ELBO decreased at iteration " + std::to_string(it) + ": " + std::to_string(prev) +
                           " -> " + std::to_string(cur));
    res.state = std::move(next);
    res.pass = std::move(pass);
    res.elbo = elbo;
    res.report.elbo_trace.push_back(cur);
    res.report.iterations = it;
    res.report.criteria = crit;
    if (crit <= opt.tolerance) {
      res.report.converged = true;
      break;
    }
  }

  if (!id.empty()) {
    auto signs = identification_signs(res.state, id, spec.r);
    if (std::any_of(signs.begin(), signs.end(), [](int v) { return v < 0; }))
      rotate_signs(res.state, &res.pass.moments, signs, spec.p);
  }
  res.report.wall_seconds =
      std::chrono::duration<double>(std::chrono::steady_clock::now() - start).count();
  return res;
}

/// Starting values: principal components of the panel (missing cells filled with
/// seeded standard normal draws) act as point-mass factors for one Bayesian
/// regression step of the loadings and the transition.
inline VariationalState init_from_pca(const TimeSeriesPanel& panel, const ModelSpec& spec, const PriorSpec& prior_in,
                                      const Identification& id, std::uint64_t seed) {
  detail::check_fit_inputs(panel, spec);
  const PriorSpec prior = validate_prior(prior_in, spec);
  const int T = static_cast<int>(panel.T());
  const int n = spec.n, r = spec.r, p = spec.p, s = spec.s();
  Rng rng(seed);
  MatrixXd X = panel.values();
  for (int t = 0; t < T; ++t)
    for (int i = 0; i < n; ++i)
      if (!panel.available(t, i)) X(t, i) = rng.normal();
  X.rowwise() -= X.colwise().mean();

  Eigen::SelfAdjointEigenSolver<MatrixXd> es(X.transpose() * X / static_cast<double>(T));
  MatrixXd f(T, r);
  const int rank = static_cast<int>((es.eigenvalues().array() > 1e-10 * std::max(1.0, es.eigenvalues().maxCoeff())).count());
  for (int k = 0; k < r; ++k) {
    if (k < std::min(rank, n)) {
      f.col(k) = X * es.eigenvectors().col(n - 1 - k);
    } else {
      f.col(k) = rng.normal_vector(T);
    }
    const double sd = std::sqrt(f.col(k).squaredNorm() / T);
    if (sd > 0.0) f.col(k) /= sd;
  }
  if (rank < r) warn("principal components have rank below r; padded with noise components");

  StateMoments point;
  point.mean.assign(T + 1, VectorXd::Zero(s));
  for (int t = 1; t <= T; ++t)
    for (int lag = 0; lag <= p; ++lag)
      if (t - 1 - lag >= 0) point.mean[t].segment(lag * r, r) = f.row(t - 1 - lag).transpose();
  point.cov.assign(T + 1, MatrixXd::Zero(s, s));
  point.second.resize(T + 1);
  point.lag_cov.assign(T + 1, MatrixXd());
  point.lag_cross.assign(T + 1, MatrixXd());
  for (int t = 0; t <= T; ++t) {
    point.second[t] = point.mean[t] * point.mean[t].transpose();
    if (t > 0) point.lag_cross[t] = (point.mean[t] * point.mean[t - 1].transpose()).topRows(r);
  }
  VariationalState q;
  q.loadings = update_loadings(panel, point, prior, equation_priors(prior, spec, id));
  q.transition = update_transition(point, prior, r);
  return q;
}

inline nlohmann::json matrix_to_json(const MatrixXd& m) {
  auto rows = nlohmann::json::array();
  for (Eigen::Index i = 0; i < m.rows(); ++i) {
    std::vector<double> row(m.cols());
    for (Eigen::Index j = 0; j < m.cols(); ++j) row[j] = m(i, j);
    rows.push_back(row);
  }
  return rows;
}

inline MatrixXd matrix_from_json(const nlohmann::json& j) {
  const Eigen::Index rows = static_cast<Eigen::Index>(j.size());
  const Eigen::Index cols = rows ? static_cast<Eigen::Index>(j.at(0).size()) : 0;
  MatrixXd m(rows, cols);
  for (Eigen::Index i = 0; i < rows; ++i) {
    if (static_cast<Eigen::Index>(j.at(i).size()) != cols) throw ParseError("ragged matrix in JSON");
    for (Eigen::Index k = 0; k < cols; ++k) m(i, k) = j.at(i).at(k).get<double>();
  }
  return m;
}

inline nlohmann::json vector_to_json(const VectorXd& v) { return std::vector<double>(v.data(), v.data() + v.size()); }

inline VectorXd vector_from_json(const nlohmann::json& j) {
  auto v = j.get<std::vector<double>>();
  return Eigen::Map<VectorXd>(v.data(), static_cast<Eigen::Index>(v.size()));
}

inline nlohmann::json state_to_json(const VariationalState& q) {
  nlohmann::json j;
  auto eqs = nlohmann::json::array();
  for (int i = 0; i < q.loadings.n(); ++i) {
    eqs.push_back({{"mu_lambda", vector_to_json(q.loadings.mu[i])},
                   {"Sigma_lambda", matrix_to_json(q.loadings.Sigma[i])},
                   {"nu_sigma", q.loadings.nu_sigma(i)},
                   {"tau2_sigma", q.loadings.tau2_sigma(i)}});
  }
  j["loadings"] = eqs;
  j["transition"] = {{"M_phi", matrix_to_json(q.transition.M_phi)},
                     {"Sigma_phi", matrix_to_json(q.transition.Sigma_phi)}};
  return j;
}

inline VariationalState state_from_json(const nlohmann::json& j) {
  VariationalState q;
  const auto& eqs = j.at("loadings");
  const int n = static_cast<int>(eqs.size());
  q.loadings.nu_sigma.resize(n);
  q.loadings.tau2_sigma.resize(n);
  for (int i = 0; i < n; ++i) {
    q.loadings.mu.push_back(vector_from_json(eqs[i].at("mu_lambda")));
    q.loadings.Sigma.push_back(matrix_from_json(eqs[i].at("Sigma_lambda")));
    q.loadings.nu_sigma(i) = eqs[i].at("nu_sigma").get<double>();
    q.loadings.tau2_sigma(i) = eqs[i].at("tau2_sigma").get<double>();
  }
  q.transition.M_phi = matrix_from_json(j.at("transition").at("M_phi"));
  q.transition.Sigma_phi = matrix_from_json(j.at("transition").at("Sigma_phi"));
  return q;
}

}  // namespace dfmvi
