#pragma once

#include <cmath>
#include <complex>
#include <cstdint>
#include <numbers>
#include <string>
#include <vector>

#include <Eigen/Dense>
#include <Eigen/Eigenvalues>
#include "json.hpp"

#include "dfmvi/errors.hpp"
#include "dfmvi/model.hpp"
#include "dfmvi/panel.hpp"
#include "dfmvi/random.hpp"

// The oracles in this file deliberately avoid the filter code and the linalg
// helpers: they build dense joint normals and condition with Eigen's LDLT.

namespace dfmvi {

struct TrueParameters {
  MatrixXd Lambda;  // n x s
  VectorXd sigma2;  // n
  MatrixXd Phi;     // r x s
};

struct Missingness {
  double random_rate = 0.0;
  std::vector<int> ragged;  // per variable: number of trailing missing periods
  std::vector<int> stride;  // per variable: observed only when (t+1) % stride == 0; 0 or 1 = every period
};

struct SimConfig {
  ModelSpec spec;
  TrueParameters truth;
  int T = 100;
  Missingness missing;
  MatrixXd Sigma_F0;  // defaults to identity when empty
  std::uint64_t seed = 1;
  bool require_stationary = false;
};

struct SimResult {
  TimeSeriesPanel panel;
  std::vector<VectorXd> factors;  // F_0..F_T
  MatrixXd complete;              // T x n before blanking
};

inline double spectral_radius(const MatrixXd& m) {
  Eigen::EigenSolver<MatrixXd> es(m, false);
  return es.eigenvalues().cwiseAbs().maxCoeff();
}

inline SimResult simulate_dfm(const SimConfig& cfg) {
  const auto& spec = cfg.spec;
  spec.validate();
  const int n = spec.n, r = spec.r, s = spec.s(), T = cfg.T;
  if (T < 1) throw DomainError("T must be >= 1");
  if (cfg.truth.Lambda.rows() != n || cfg.truth.Lambda.cols() != s) throw StructuralError("Lambda must be n x s");
  if (cfg.truth.sigma2.size() != n) throw StructuralError("sigma2 must have length n");
  if ((cfg.truth.sigma2.array() <= 0.0).any()) throw DomainError("idiosyncratic variances must be positive");
  const MatrixXd Mt = companion(cfg.truth.Phi, r, spec.p);
  if (cfg.require_stationary && spectral_radius(Mt) >= 1.0)
    throw DomainError("transition is explosive but stationarity was requested");
  if (cfg.missing.random_rate < 0.0 || cfg.missing.random_rate > 1.0)
    throw DomainError("missing rate must lie in [0, 1]");

  Rng rng(cfg.seed);
  const MatrixXd SF0 = cfg.Sigma_F0.size() ? cfg.Sigma_F0 : MatrixXd::Identity(s, s);
  Eigen::LLT<MatrixXd> llt(SF0);
  if (llt.info() != Eigen::Success) throw DomainError("Sigma_F0 is not positive definite");
  SimResult out;
  out.factors.resize(T + 1);
  out.factors[0] = llt.matrixL() * rng.normal_vector(s);
  out.complete.resize(T, n);
  for (int t = 1; t <= T; ++t) {
    VectorXd F = Mt * out.factors[t - 1];
    F.head(r) += rng.normal_vector(r);
    out.factors[t] = F;
    for (int i = 0; i < n; ++i)
      out.complete(t - 1, i) = cfg.truth.Lambda.row(i).dot(F) + std::sqrt(cfg.truth.sigma2(i)) * rng.normal();
  }
  Mask mask = Mask::Constant(T, n, true);
  for (int t = 0; t < T; ++t)
    for (int i = 0; i < n; ++i) {
      if (cfg.missing.random_rate > 0.0 && rng.uniform() < cfg.missing.random_rate) mask(t, i) = false;
      if (i < static_cast<int>(cfg.missing.ragged.size()) && t >= T - cfg.missing.ragged[i]) mask(t, i) = false;
      if (i < static_cast<int>(cfg.missing.stride.size()) && cfg.missing.stride[i] > 1 &&
          (t + 1) % cfg.missing.stride[i] != 0)
        mask(t, i) = false;
    }
  out.panel = TimeSeriesPanel(out.complete, mask, {});
  return out;
}

inline nlohmann::json truth_to_json(const SimResult& sim, const TrueParameters& truth) {
  auto mat = [](const MatrixXd& m) {
    auto rows = nlohmann::json::array();
    for (Eigen::Index i = 0; i < m.rows(); ++i) {
      auto row = nlohmann::json::array();
      for (Eigen::Index j = 0; j < m.cols(); ++j) row.push_back(m(i, j));
      rows.push_back(row);
    }
    return rows;
  };
  nlohmann::json j;
  j["Lambda"] = mat(truth.Lambda);
  j["sigma2"] = std::vector<double>(truth.sigma2.data(), truth.sigma2.data() + truth.sigma2.size());
  j["Phi"] = mat(truth.Phi);
  auto f = nlohmann::json::array();
  for (const auto& F : sim.factors) f.push_back(std::vector<double>(F.data(), F.data() + F.size()));
  j["factors"] = f;
  return j;
}

/// Parameters for test instances: loadings N(0, scale^2), variances uniform in
/// [lo, hi], transition rescaled to the requested spectral radius.
inline TrueParameters random_parameters(const ModelSpec& spec, Rng& rng, double loading_scale = 1.0,
                                        double sigma2_lo = 0.2, double sigma2_hi = 1.0, double radius = 0.7) {
  TrueParameters p;
  p.Lambda = loading_scale * rng.normal_matrix(spec.n, spec.s());
  p.sigma2.resize(spec.n);
  for (int i = 0; i < spec.n; ++i) p.sigma2(i) = sigma2_lo + (sigma2_hi - sigma2_lo) * rng.uniform();
  p.Phi = rng.normal_matrix(spec.r, spec.s());
  const double rho = spectral_radius(companion(p.Phi, spec.r, spec.p));
  if (rho > 0.0) {
    // scaling lag-j coefficients by c^(j+1) scales the companion eigenvalues by c
    const double c = radius / rho;
    for (int lag = 0; lag <= spec.p; ++lag) p.Phi.middleCols(lag * spec.r, spec.r) *= std::pow(c, lag + 1);
  }
  return p;
}

/// One draw of (Lambda, sigma2, Phi) from the prior. Zero restrictions are
/// imposed and the restricted-positive loading is drawn from the prior
/// truncated to positive values (by reflection, valid for a zero-mean prior).
inline TrueParameters draw_from_prior(const ModelSpec& spec, const PriorSpec& prior, const Identification& id,
                                      Rng& rng) {
  const int s = spec.s();
  TrueParameters p;
  p.Lambda = MatrixXd::Zero(spec.n, s);
  p.sigma2.resize(spec.n);
  auto free = id.free_indices(spec);
  auto pos = id.positive_index(spec);
  auto sg = id.signs(spec);
  for (int i = 0; i < spec.n; ++i) {
    p.sigma2(i) = rng.scaled_inv_chi_squared(prior.nu(i), prior.tau2(i));
    MatrixXd prec(free[i].size(), free[i].size());
    for (std::size_t a = 0; a < free[i].size(); ++a)
      for (std::size_t b = 0; b < free[i].size(); ++b) prec(a, b) = prior.V_inv(free[i][a], free[i][b]);
    Eigen::LLT<MatrixXd> llt(prec);
    // x = L^{-T} z has covariance prec^{-1}
    VectorXd z = rng.normal_vector(free[i].size());
    VectorXd x = llt.matrixU().solve(z);
    x *= std::sqrt(p.sigma2(i));
    for (std::size_t a = 0; a < free[i].size(); ++a) p.Lambda(i, free[i][a]) = x(a);
    if (pos[i] >= 0) p.Lambda(i, pos[i]) = sg[i] * std::abs(p.Lambda(i, pos[i]));
  }
  Eigen::LLT<MatrixXd> lw(prior.W_inv);
  p.Phi.resize(spec.r, s);
  for (int k = 0; k < spec.r; ++k) p.Phi.row(k) = lw.matrixU().solve(rng.normal_vector(s)).transpose();
  return p;
}

/// Linear-Gaussian state system for the dense oracle. Observation noise of
/// variable i is noise_var(i); pseudo-observations F_t = 0 + e with precision
/// Sigma_theta[t-1] are added whenever that matrix is nonzero.
struct DenseSystem {
  MatrixXd M_tilde;
  MatrixXd P0;
  int r = 1;
  MatrixXd Lambda;
  VectorXd noise_var;
  std::vector<MatrixXd> Sigma_theta;  // empty: no pseudo-observations
};

struct DenseMoments {
  VectorXd joint_mean;  // stacked F_0..F_T
  MatrixXd joint_cov;
  std::vector<VectorXd> mean;
  std::vector<MatrixXd> cov, second, lag_cov, lag_cross;
  double loglik = 0.0;  // log density of all (pseudo-)observations
};

inline constexpr int kDenseOracleMaxDim = 64;

inline DenseMoments dense_gaussian_oracle(const DenseSystem& sys, const TimeSeriesPanel& panel) {
  const int T = static_cast<int>(panel.T());
  const int s = static_cast<int>(sys.M_tilde.rows());
  const int N = (T + 1) * s;
  if (N > kDenseOracleMaxDim) throw DomainError("dense oracle size cap exceeded: (T+1)s = " + std::to_string(N));
  const int r = sys.r;

  // prior covariance of X = (F_0, ..., F_T)
  MatrixXd Q = MatrixXd::Zero(s, s);
  Q.topLeftCorner(r, r).setIdentity();
  std::vector<MatrixXd> var(T + 1);
  var[0] = sys.P0;
  for (int t = 1; t <= T; ++t) var[t] = sys.M_tilde * var[t - 1] * sys.M_tilde.transpose() + Q;
  MatrixXd Sx = MatrixXd::Zero(N, N);
  for (int u = 0; u <= T; ++u) {
    MatrixXd block = var[u];  // Cov(F_t, F_u) for t >= u
    for (int t = u; t <= T; ++t) {
      Sx.block(t * s, u * s, s, s) = block;
      Sx.block(u * s, t * s, s, s) = block.transpose();
      block = sys.M_tilde * block;
    }
  }

  // observation rows
  std::vector<VectorXd> rows;
  std::vector<double> vals, noise;
  std::vector<int> times;
  for (int t = 1; t <= T; ++t) {
    for (int i = 0; i < panel.n(); ++i) {
      if (!panel.available(t - 1, i)) continue;
      VectorXd z = VectorXd::Zero(N);
      z.segment(t * s, s) = sys.Lambda.row(i).transpose();
      rows.push_back(z);
      vals.push_back(panel.value(t - 1, i));
      noise.push_back(sys.noise_var(i));
    }
    if (!sys.Sigma_theta.empty()) {
      Eigen::SelfAdjointEigenSolver<MatrixXd> es(0.5 * (sys.Sigma_theta[t - 1] + sys.Sigma_theta[t - 1].transpose()));
      const double top = std::max(1e-300, es.eigenvalues().cwiseAbs().maxCoeff());
      for (int k = 0; k < s; ++k) {
        const double lam = es.eigenvalues()(k);
        if (lam <= 1e-14 * top) continue;
        VectorXd z = VectorXd::Zero(N);
        z.segment(t * s, s) = es.eigenvectors().col(k);
        rows.push_back(z);
        vals.push_back(0.0);
        noise.push_back(1.0 / lam);
      }
    }
  }
  const int m = static_cast<int>(rows.size());
  MatrixXd Z(m, N);
  VectorXd y(m);
  for (int k = 0; k < m; ++k) {
    Z.row(k) = rows[k].transpose();
    y(k) = vals[k];
  }
  DenseMoments out;
  if (m == 0) {
    out.joint_mean = VectorXd::Zero(N);
    out.joint_cov = Sx;
  } else {
    MatrixXd S = Z * Sx * Z.transpose();
    for (int k = 0; k < m; ++k) S(k, k) += noise[k];
    Eigen::LDLT<MatrixXd> ldlt(S);
    MatrixXd SxZt = Sx * Z.transpose();
    out.joint_mean = SxZt * ldlt.solve(y);
    out.joint_cov = Sx - SxZt * ldlt.solve(SxZt.transpose());
    out.joint_cov = 0.5 * (out.joint_cov + out.joint_cov.transpose()).eval();
    const double logdet = ldlt.vectorD().array().log().sum();
    out.loglik = -0.5 * (m * 1.8378770664093454835606594728112 + logdet + y.dot(ldlt.solve(y)));
  }
  out.mean.resize(T + 1);
  out.cov.resize(T + 1);
  out.second.resize(T + 1);
  out.lag_cov.assign(T + 1, MatrixXd());
  out.lag_cross.assign(T + 1, MatrixXd());
  for (int t = 0; t <= T; ++t) {
    out.mean[t] = out.joint_mean.segment(t * s, s);
    out.cov[t] = out.joint_cov.block(t * s, t * s, s, s);
    out.second[t] = out.cov[t] + out.mean[t] * out.mean[t].transpose();
    if (t > 0) {
      out.lag_cov[t] = out.joint_cov.block(t * s, (t - 1) * s, s, s);
      out.lag_cross[t] = (out.lag_cov[t] + out.mean[t] * out.mean[t - 1].transpose()).topRows(r);
    }
  }
  return out;
}

/// Variational factors needed by the Monte Carlo oracle, restated in plain
/// form so that this file does not depend on the vi module.
struct McVariational {
  std::vector<VectorXd> mu;     // per equation, length s (zeros at restricted entries)
  std::vector<MatrixXd> Sigma;  // per equation, s x s
  VectorXd nu_sigma, tau2_sigma;
  MatrixXd M_phi, Sigma_phi;
  std::vector<std::vector<int>> free;  // per equation, free loading indices
};

struct McEstimate {
  double estimate = 0.0;
  double standard_error = 0.0;
};

namespace detail {

inline double log_sinvchi2(double x, double nu, double tau2) {
  return 0.5 * nu * std::log(0.5 * nu * tau2) - std::lgamma(0.5 * nu) - (1.0 + 0.5 * nu) * std::log(x) -
         0.5 * nu * tau2 / x;
}

/// Log density of N(mean, scale * C) at x, with C given by its LLT and log det.
inline double log_normal(const VectorXd& x, const VectorXd& mean, const Eigen::LLT<MatrixXd>& C, double logdetC,
                         double scale) {
  const double k = static_cast<double>(x.size());
  VectorXd z = C.matrixL().solve(x - mean);
  return -0.5 * (k * 1.8378770664093454835606594728112 + logdetC + k * std::log(scale) + z.squaredNorm() / scale);
}

inline double llt_logdet(const Eigen::LLT<MatrixXd>& llt) {
  return 2.0 * llt.matrixLLT().diagonal().array().log().sum();
}

}  // namespace detail

/// Monte Carlo estimate of E_q[ln p(Y_A, F, theta)] - E_q[ln q(theta)] - E_q[ln q(F)].
/// q(F) is passed as the dense joint normal of the augmented system for q(theta).
/// Densities are evaluated over the free state coordinates (F_0, f_1, ..., f_T).
inline McEstimate mc_elbo_oracle(const TimeSeriesPanel& panel, const ModelSpec& spec, const PriorSpec& prior,
                                 const McVariational& q, const DenseMoments& qF, long n_samples,
                                 std::uint64_t seed) {
  const int T = static_cast<int>(panel.T());
  const int n = spec.n, r = spec.r, s = spec.s(), p = spec.p;
  if ((T + 1) * s > kDenseOracleMaxDim) throw DomainError("Monte Carlo oracle size cap exceeded");
  if (n_samples < 2) throw DomainError("n_samples must be >= 2");

  // free coordinates of the stacked state
  std::vector<int> free_idx;
  for (int k = 0; k < s; ++k) free_idx.push_back(k);
  for (int t = 1; t <= T; ++t)
    for (int k = 0; k < r; ++k) free_idx.push_back(t * s + k);
  const int d = static_cast<int>(free_idx.size());
  VectorXd fmean(d);
  MatrixXd fcov(d, d);
  for (int a = 0; a < d; ++a) {
    fmean(a) = qF.joint_mean(free_idx[a]);
    for (int b = 0; b < d; ++b) fcov(a, b) = qF.joint_cov(free_idx[a], free_idx[b]);
  }
  Eigen::LLT<MatrixXd> qF_llt(fcov);
  if (qF_llt.info() != Eigen::Success) throw NumericalError("q(F) covariance over free coordinates is singular");
  const double qF_logdet = detail::llt_logdet(qF_llt);

  // factorizations reused across draws
  std::vector<Eigen::LLT<MatrixXd>> qlam(n), plam(n);
  std::vector<double> qlam_ld(n), plam_ld(n);
  std::vector<VectorXd> mu_free(n);
  for (int i = 0; i < n; ++i) {
    const auto& K = q.free[i];
    MatrixXd SK(K.size(), K.size()), VinvK(K.size(), K.size());
    mu_free[i].resize(K.size());
    for (std::size_t a = 0; a < K.size(); ++a) {
      mu_free[i](a) = q.mu[i](K[a]);
      for (std::size_t b = 0; b < K.size(); ++b) {
        SK(a, b) = q.Sigma[i](K[a], K[b]);
        VinvK(a, b) = prior.V_inv(K[a], K[b]);
      }
    }
    qlam[i].compute(SK);
    qlam_ld[i] = detail::llt_logdet(qlam[i]);
    MatrixXd VK = VinvK.inverse();
    plam[i].compute(0.5 * (VK + VK.transpose()));
    plam_ld[i] = detail::llt_logdet(plam[i]);
  }
  Eigen::LLT<MatrixXd> qphi(q.Sigma_phi);
  const double qphi_ld = detail::llt_logdet(qphi);
  MatrixXd W = prior.W_inv.inverse();
  Eigen::LLT<MatrixXd> pphi(0.5 * (W + W.transpose()));
  const double pphi_ld = detail::llt_logdet(pphi);
  Eigen::LLT<MatrixXd> pF0(prior.Sigma_F0);
  const double pF0_ld = detail::llt_logdet(pF0);

  Rng rng(seed);
  double sum = 0.0, sumsq = 0.0;
  std::vector<VectorXd> lam(n, VectorXd::Zero(s));
  VectorXd sig2(n);
  MatrixXd Phi(r, s);
  std::vector<VectorXd> F(T + 1, VectorXd::Zero(s));
  VectorXd x(d);
  const VectorXd zero_r = VectorXd::Zero(r);
  for (long draw = 0; draw < n_samples; ++draw) {
    double lq = 0.0, lp = 0.0;
    for (int i = 0; i < n; ++i) {
      const auto& K = q.free[i];
      sig2(i) = rng.scaled_inv_chi_squared(q.nu_sigma(i), q.tau2_sigma(i));
      VectorXd lk = qlam[i].matrixL() * rng.normal_vector(K.size());
      lk = mu_free[i] + std::sqrt(sig2(i)) * lk;
      lam[i].setZero();
      for (std::size_t a = 0; a < K.size(); ++a) lam[i](K[a]) = lk(a);
      lq += detail::log_sinvchi2(sig2(i), q.nu_sigma(i), q.tau2_sigma(i));
      lq += detail::log_normal(lk, mu_free[i], qlam[i], qlam_ld[i], sig2(i));
      lp += detail::log_sinvchi2(sig2(i), prior.nu(i), prior.tau2(i));
      lp += detail::log_normal(lk, VectorXd::Zero(K.size()), plam[i], plam_ld[i], sig2(i));
    }
    for (int k = 0; k < r; ++k) {
      VectorXd row = q.M_phi.row(k).transpose() + qphi.matrixL() * rng.normal_vector(s);
      Phi.row(k) = row.transpose();
      lq += detail::log_normal(row, q.M_phi.row(k).transpose(), qphi, qphi_ld, 1.0);
      lp += detail::log_normal(row, VectorXd::Zero(s), pphi, pphi_ld, 1.0);
    }
    x = fmean + qF_llt.matrixL() * rng.normal_vector(d);
    lq += detail::log_normal(x, fmean, qF_llt, qF_logdet, 1.0);
    F[0] = x.head(s);
    for (int t = 1; t <= T; ++t) {
      F[t].head(r) = x.segment(s + (t - 1) * r, r);
      if (p > 0) F[t].tail(s - r) = F[t - 1].head(s - r);
    }
    lp += detail::log_normal(F[0], VectorXd::Zero(s), pF0, pF0_ld, 1.0);
    for (int t = 1; t <= T; ++t) {
      VectorXd u = F[t].head(r) - Phi * F[t - 1];
      lp += -0.5 * (r * 1.8378770664093454835606594728112 + u.squaredNorm());
      for (int i = 0; i < n; ++i) {
        if (!panel.available(t - 1, i)) continue;
        const double e = panel.value(t - 1, i) - lam[i].dot(F[t]);
        lp += -0.5 * (1.8378770664093454835606594728112 + std::log(sig2(i)) + e * e / sig2(i));
      }
    }
    const double v = lp - lq;
    sum += v;
    sumsq += v * v;
  }
  const double N = static_cast<double>(n_samples);
  McEstimate est;
  est.estimate = sum / N;
  const double var = std::max(0.0, (sumsq - N * est.estimate * est.estimate) / (N - 1.0));
  est.standard_error = std::sqrt(var / N);
  return est;
}

}  // namespace dfmvi
