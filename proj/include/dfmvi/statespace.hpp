#pragma once

#include <cmath>
#include <numbers>
#include <string>
#include <vector>

#include <Eigen/Dense>

#include "dfmvi/errors.hpp"
#include "dfmvi/linalg.hpp"
#include "dfmvi/model.hpp"
#include "dfmvi/panel.hpp"
#include "dfmvi/random.hpp"

namespace dfmvi {

inline constexpr double kLog2Pi = 1.8378770664093454835606594728112;

/// Collapsed s-dimensional observation y*_t = F_t + e, e ~ N(0, H*_t).
/// `observed` is false when the time step carries no information at all
/// (no available data and a zero Sigma_theta), in which case the filter skips it.
struct CollapsedObservation {
  VectorXd y_star;
  MatrixXd H_star;
  MatrixXd precision;  // H*^{-1} = M'A Psi^{-1} M + Sigma_theta
  double logdet_H = 0.0;
  bool observed = true;
};

/// Sum of the loading covariances of available variables, plus r * Sigma_phi
/// before the last period.
inline MatrixXd build_sigma_theta(const std::vector<int>& available, const std::vector<MatrixXd>& Sigma_lambda,
                                  const MatrixXd& Sigma_phi, int r, bool is_last) {
  const Eigen::Index s = Sigma_phi.rows();
  MatrixXd out = MatrixXd::Zero(s, s);
  for (int i : available) {
    if (Sigma_lambda.at(i).rows() != s || Sigma_lambda.at(i).cols() != s)
      throw StructuralError("Sigma_lambda block has wrong dimension");
    out += Sigma_lambda[i];
  }
  if (!is_last) out += static_cast<double>(r) * Sigma_phi;
  linalg::symmetrize_in_place(out);
  return out;
}

/// Generalized least squares collapse of the available observations and the
/// s pseudo-observations of zero with precision Sigma_theta.
/// `y` holds the full length-n row; entries outside `available` are ignored.
inline CollapsedObservation collapse_observation(const VectorXd& y, const std::vector<int>& available,
                                                 const MatrixXd& M_Lambda, const VectorXd& Psi_inv,
                                                 const MatrixXd& Sigma_theta) {
  const Eigen::Index s = M_Lambda.cols();
  if (Sigma_theta.rows() != s || Sigma_theta.cols() != s) throw StructuralError("Sigma_theta must be s x s");
  if (y.size() != M_Lambda.rows() || Psi_inv.size() != M_Lambda.rows())
    throw StructuralError("observation, loadings and Psi_inv disagree on n");
  CollapsedObservation out;
  MatrixXd omega = Sigma_theta;
  VectorXd b = VectorXd::Zero(s);
  for (int i : available) {
    const auto m = M_Lambda.row(i).transpose();
    omega.noalias() += Psi_inv(i) * m * m.transpose();
    b.noalias() += Psi_inv(i) * y(i) * m;
  }
  linalg::symmetrize_in_place(omega);
  out.precision = omega;
  if (available.empty() && omega.cwiseAbs().maxCoeff() == 0.0) {
    out.observed = false;
    out.y_star = VectorXd::Zero(s);
    out.H_star = MatrixXd::Zero(s, s);
    return out;
  }
  Eigen::LLT<MatrixXd> llt(omega);
  if (llt.info() != Eigen::Success)
    throw NumericalError(
        "collapsed precision is singular; Sigma_theta is not positive definite at a step with too few "
        "observations (use positive definite priors)");
  out.H_star = llt.solve(MatrixXd::Identity(s, s));
  linalg::symmetrize_in_place(out.H_star);
  out.y_star = llt.solve(b);
  out.logdet_H = -linalg::logdet(llt);
  return out;
}

/// e^S' (Sigma^S)^{-1} e^S for the stacked residual of available observations
/// and the pseudo-zeros after projecting on y*.
inline double remainder_quadratic(const VectorXd& y, const std::vector<int>& available, const MatrixXd& M_Lambda,
                                  const VectorXd& Psi_inv, const MatrixXd& Sigma_theta, const VectorXd& y_star) {
  if (y_star.size() != M_Lambda.cols() || Sigma_theta.rows() != y_star.size())
    throw StructuralError("remainder terms: dimension mismatch");
  double q = y_star.dot(Sigma_theta * y_star);
  for (int i : available) {
    const double e = y(i) - M_Lambda.row(i).dot(y_star);
    q += Psi_inv(i) * e * e;
  }
  return q;
}

/// Linear-Gaussian system in collapsed form.
struct SsmParams {
  MatrixXd M_tilde;  // s x s companion transition
  MatrixXd P0;       // initial state covariance (mean zero)
  int r = 1;
  std::vector<CollapsedObservation> collapsed;  // t = 1..T stored at [t-1]
};

/// Output of a forward pass. Index t runs 0..T for filtered moments and
/// 1..T for predicted moments and innovations (slot 0 left empty).
struct FilterOutput {
  std::vector<VectorXd> pred_mean, filt_mean;
  std::vector<MatrixXd> pred_cov, filt_cov;
  std::vector<VectorXd> innovation;  // collapsed filter only
  std::vector<MatrixXd> G;
  std::vector<double> logdet_G;
  std::vector<double> innovation_quad;  // v' G^{-1} v
  std::vector<bool> observed;
  double loglik = 0.0;
  int T() const { return static_cast<int>(filt_mean.size()) - 1; }
};

struct StateMoments {
  std::vector<VectorXd> mean;    // E[F_t], t = 0..T
  std::vector<MatrixXd> cov;     // Cov[F_t]
  std::vector<MatrixXd> second;  // E[F_t F_t']
  std::vector<MatrixXd> lag_cov;    // Cov[F_t, F_{t-1}], t = 1..T (slot 0 empty)
  std::vector<MatrixXd> lag_cross;  // E[f_t F_{t-1}'] (r x s), t = 1..T
  int T() const { return static_cast<int>(mean.size()) - 1; }
};

namespace detail {

inline MatrixXd state_noise(Eigen::Index s, int r) {
  MatrixXd Q = MatrixXd::Zero(s, s);
  Q.topLeftCorner(r, r).setIdentity();
  return Q;
}

inline void predict(const MatrixXd& Mt, const MatrixXd& Q, const VectorXd& m, const MatrixXd& C, VectorXd& a,
                    MatrixXd& P) {
  a.noalias() = Mt * m;
  P.noalias() = Mt * C * Mt.transpose();
  P += Q;
  linalg::symmetrize_in_place(P);
}

inline void init_output(FilterOutput& out, int T) {
  out.pred_mean.assign(T + 1, VectorXd());
  out.pred_cov.assign(T + 1, MatrixXd());
  out.filt_mean.assign(T + 1, VectorXd());
  out.filt_cov.assign(T + 1, MatrixXd());
  out.innovation.assign(T + 1, VectorXd());
  out.G.assign(T + 1, MatrixXd());
  out.logdet_G.assign(T + 1, 0.0);
  out.innovation_quad.assign(T + 1, 0.0);
  out.observed.assign(T + 1, false);
  out.loglik = 0.0;
}

}  // namespace detail

/// Filter over y*_t = F_t + e*_t. Returns the predicted/filtered moments, the
/// one-step innovations and their covariances G_t, and the log-likelihood of Y*.
inline FilterOutput kalman_filter(const SsmParams& params) {
  const Eigen::Index s = params.M_tilde.rows();
  const int T = static_cast<int>(params.collapsed.size());
  const MatrixXd Q = detail::state_noise(s, params.r);
  FilterOutput out;
  detail::init_output(out, T);
  out.filt_mean[0] = VectorXd::Zero(s);
  out.filt_cov[0] = linalg::symmetrize(params.P0);
  for (int t = 1; t <= T; ++t) {
    VectorXd a;
    MatrixXd P;
    detail::predict(params.M_tilde, Q, out.filt_mean[t - 1], out.filt_cov[t - 1], a, P);
    out.pred_mean[t] = a;
    out.pred_cov[t] = P;
    const auto& obs = params.collapsed[t - 1];
    if (!obs.observed) {
      out.filt_mean[t] = a;
      out.filt_cov[t] = P;
      continue;
    }
    MatrixXd G = P + obs.H_star;
    linalg::symmetrize_in_place(G);
    auto llt = linalg::cholesky(G, "innovation covariance G at t=" + std::to_string(t));
    VectorXd v = obs.y_star - a;
    VectorXd Ginv_v = llt.solve(v);
    MatrixXd Ginv_P = llt.solve(P);
    out.filt_mean[t] = a + P * Ginv_v;
    // P - P G^{-1} P = H* G^{-1} P
    MatrixXd C = obs.H_star * Ginv_P;
    linalg::symmetrize_in_place(C);
    out.filt_cov[t] = C;
    out.innovation[t] = v;
    out.G[t] = G;
    out.logdet_G[t] = linalg::logdet(llt);
    out.innovation_quad[t] = v.dot(Ginv_v);
    out.observed[t] = true;
    out.loglik += -0.5 * (static_cast<double>(s) * kLog2Pi + out.logdet_G[t] + out.innovation_quad[t]);
    if (!std::isfinite(out.loglik)) throw NumericalError("non-finite log-likelihood at t=" + std::to_string(t));
  }
  return out;
}

/// Fixed-interval smoother with lag-one covariances.
/// Cov[F_{t+1}, F_t | all] = Cov[F_{t+1} | all] J_t' with the usual gain J_t.
inline StateMoments kalman_smoother(const FilterOutput& f, const MatrixXd& M_tilde, int r) {
  const int T = f.T();
  const Eigen::Index s = M_tilde.rows();
  StateMoments sm;
  sm.mean.assign(T + 1, VectorXd());
  sm.cov.assign(T + 1, MatrixXd());
  sm.second.assign(T + 1, MatrixXd());
  sm.lag_cov.assign(T + 1, MatrixXd());
  sm.lag_cross.assign(T + 1, MatrixXd());
  sm.mean[T] = f.filt_mean[T];
  sm.cov[T] = f.filt_cov[T];
  for (int t = T - 1; t >= 0; --t) {
    auto llt = linalg::cholesky(f.pred_cov[t + 1], "predicted covariance at t=" + std::to_string(t + 1));
    // J = C_t M' P_{t+1}^{-1}
    MatrixXd J = llt.solve(M_tilde * f.filt_cov[t]).transpose();
    sm.mean[t] = f.filt_mean[t] + J * (sm.mean[t + 1] - f.pred_mean[t + 1]);
    MatrixXd C = f.filt_cov[t] + J * (sm.cov[t + 1] - f.pred_cov[t + 1]) * J.transpose();
    linalg::symmetrize_in_place(C);
    sm.cov[t] = C;
    sm.lag_cov[t + 1] = sm.cov[t + 1] * J.transpose();
  }
  for (int t = 0; t <= T; ++t) {
    sm.second[t] = sm.cov[t] + sm.mean[t] * sm.mean[t].transpose();
    linalg::symmetrize_in_place(sm.second[t]);
    if (t > 0) {
      MatrixXd full = sm.lag_cov[t] + sm.mean[t] * sm.mean[t - 1].transpose();
      sm.lag_cross[t] = full.topRows(r);
    }
  }
  (void)s;
  return sm;
}

/// Reference filter over the uncollapsed system: the available observations
/// stacked with s pseudo-observations of zero whose noise covariance is
/// Sigma_theta^{-1}. Steps with no data and zero Sigma_theta carry no observation.
struct AugmentedStep {
  std::vector<int> available;
  MatrixXd Sigma_theta;
};

inline FilterOutput kalman_filter_augmented(const TimeSeriesPanel& panel, const MatrixXd& M_Lambda,
                                            const VectorXd& Psi_inv, const std::vector<MatrixXd>& Sigma_theta,
                                            const MatrixXd& M_tilde, const MatrixXd& P0, int r) {
  const Eigen::Index s = M_tilde.rows();
  const int T = static_cast<int>(panel.T());
  const MatrixXd Q = detail::state_noise(s, r);
  auto avail = availability_summary(panel).available;
  FilterOutput out;
  detail::init_output(out, T);
  out.filt_mean[0] = VectorXd::Zero(s);
  out.filt_cov[0] = linalg::symmetrize(P0);
  for (int t = 1; t <= T; ++t) {
    VectorXd a;
    MatrixXd P;
    detail::predict(M_tilde, Q, out.filt_mean[t - 1], out.filt_cov[t - 1], a, P);
    out.pred_mean[t] = a;
    out.pred_cov[t] = P;
    const auto& idx = avail[t - 1];
    const MatrixXd& St = Sigma_theta[t - 1];
    const bool pseudo = St.cwiseAbs().maxCoeff() > 0.0;
    const Eigen::Index na = static_cast<Eigen::Index>(idx.size());
    const Eigen::Index m = na + (pseudo ? s : 0);
    if (m == 0) {
      out.filt_mean[t] = a;
      out.filt_cov[t] = P;
      continue;
    }
    MatrixXd Z = MatrixXd::Zero(m, s);
    MatrixXd R = MatrixXd::Zero(m, m);
    VectorXd y = VectorXd::Zero(m);
    for (Eigen::Index k = 0; k < na; ++k) {
      Z.row(k) = M_Lambda.row(idx[k]);
      R(k, k) = 1.0 / Psi_inv(idx[k]);
      y(k) = panel.value(t - 1, idx[k]);
    }
    if (pseudo) {
      Z.bottomRows(s).setIdentity();
      R.bottomRightCorner(s, s) = linalg::spd_inverse(St, "Sigma_theta at t=" + std::to_string(t));
    }
    MatrixXd S = Z * P * Z.transpose() + R;
    linalg::symmetrize_in_place(S);
    auto llt = linalg::cholesky(S, "augmented innovation covariance at t=" + std::to_string(t));
    VectorXd v = y - Z * a;
    MatrixXd K = llt.solve(Z * P).transpose();
    out.filt_mean[t] = a + K * v;
    MatrixXd IKZ = MatrixXd::Identity(s, s) - K * Z;
    MatrixXd C = IKZ * P * IKZ.transpose() + K * R * K.transpose();
    linalg::symmetrize_in_place(C);
    out.filt_cov[t] = C;
    out.observed[t] = true;
    out.loglik += -0.5 * (static_cast<double>(m) * kLog2Pi + linalg::logdet(llt) + v.dot(llt.solve(v)));
  }
  return out;
}

/// Log-likelihood of the augmented system assembled from the collapsed filter
/// and the remainder terms:
///   l(Y*) + sum_t [ -n_t/2 ln 2pi - q_t/2 + 1/2 ln det H*_t + 1/2 ln det Sigma_theta_t ]
///   - 1/2 sum_{available} ln tau2_i
/// where q_t is the remainder quadratic. Only steps with an observation contribute.
inline double augmented_loglik_from_collapsed(const TimeSeriesPanel& panel, const MatrixXd& M_Lambda,
                                              const VectorXd& Psi_inv, const std::vector<MatrixXd>& Sigma_theta,
                                              const SsmParams& params, const FilterOutput& f) {
  auto avail = availability_summary(panel).available;
  double ll = f.loglik;
  for (int t = 1; t <= f.T(); ++t) {
    const auto& obs = params.collapsed[t - 1];
    if (!obs.observed) continue;
    const auto& idx = avail[t - 1];
    VectorXd y = panel.row_zero_filled(t - 1);
    const double q = remainder_quadratic(y, idx, M_Lambda, Psi_inv, Sigma_theta[t - 1], obs.y_star);
    ll += -0.5 * static_cast<double>(idx.size()) * kLog2Pi - 0.5 * q + 0.5 * obs.logdet_H;
    if (Sigma_theta[t - 1].cwiseAbs().maxCoeff() > 0.0) ll += 0.5 * linalg::spd_logdet(Sigma_theta[t - 1], "Sigma_theta");
    for (int i : idx) ll += 0.5 * std::log(Psi_inv(i));
  }
  return ll;
}

/// Forward filter for y_t = Lambda F_t + e_t, e_t ~ N(0, diag(sigma2)), over
/// available entries only. Observations are processed one scalar at a time.
inline FilterOutput kalman_filter_direct(const TimeSeriesPanel& panel, const MatrixXd& Lambda,
                                         const VectorXd& sigma2, const MatrixXd& M_tilde, const MatrixXd& P0,
                                         int r) {
  const Eigen::Index s = M_tilde.rows();
  const int T = static_cast<int>(panel.T());
  const MatrixXd Q = detail::state_noise(s, r);
  FilterOutput out;
  detail::init_output(out, T);
  out.filt_mean[0] = VectorXd::Zero(s);
  out.filt_cov[0] = linalg::symmetrize(P0);
  VectorXd Cl(s);
  for (int t = 1; t <= T; ++t) {
    VectorXd m;
    MatrixXd C;
    detail::predict(M_tilde, Q, out.filt_mean[t - 1], out.filt_cov[t - 1], m, C);
    out.pred_mean[t] = m;
    out.pred_cov[t] = C;
    for (Eigen::Index i = 0; i < panel.n(); ++i) {
      if (!panel.available(t - 1, i)) continue;
      const auto lam = Lambda.row(i).transpose();
      Cl.noalias() = C * lam;
      const double fv = lam.dot(Cl) + sigma2(i);
      if (!(fv > 0.0)) throw NumericalError("nonpositive innovation variance at t=" + std::to_string(t));
      const double v = panel.value(t - 1, i) - lam.dot(m);
      m += Cl * (v / fv);
      C.noalias() -= (Cl / fv) * Cl.transpose();
      out.loglik += -0.5 * (kLog2Pi + std::log(fv) + v * v / fv);
      out.observed[t] = true;
    }
    linalg::symmetrize_in_place(C);
    out.filt_mean[t] = m;
    out.filt_cov[t] = C;
  }
  return out;
}

/// Joint draw of F_0..F_T from the filtered moments (backward sampling).
/// With p > 0 the leading rp entries of F_t are copied from F_{t+1}; only the
/// trailing r-block is drawn from its conditional.
inline std::vector<VectorXd> backward_sample(const FilterOutput& f, const MatrixXd& M_tilde, int r, Rng& rng) {
  const int T = f.T();
  const Eigen::Index s = M_tilde.rows();
  const Eigen::Index lead = s - r;
  std::vector<VectorXd> path(T + 1);
  {
    auto llt = linalg::cholesky(f.filt_cov[T], "filtered covariance at T");
    path[T] = f.filt_mean[T] + llt.matrixL() * rng.normal_vector(s);
  }
  for (int t = T - 1; t >= 0; --t) {
    const MatrixXd& C = f.filt_cov[t];
    const VectorXd& m = f.filt_mean[t];
    auto llt = linalg::cholesky(f.pred_cov[t + 1], "predicted covariance at t=" + std::to_string(t + 1));
    MatrixXd J = llt.solve(M_tilde * C).transpose();
    VectorXd mean = m + J * (path[t + 1] - f.pred_mean[t + 1]);
    MatrixXd cov = C - J * M_tilde * C;
    linalg::symmetrize_in_place(cov);
    VectorXd draw(s);
    if (lead > 0) draw.head(lead) = path[t + 1].tail(lead);
    MatrixXd block = cov.bottomRightCorner(r, r);
    auto lb = linalg::cholesky(block, "backward conditional covariance at t=" + std::to_string(t));
    draw.tail(r) = mean.tail(r) + lb.matrixL() * rng.normal_vector(r);
    path[t] = draw;
  }
  return path;
}

}  // namespace dfmvi
