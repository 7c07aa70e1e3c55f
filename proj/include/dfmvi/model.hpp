#pragma once

#include <cmath>
#include <string>
#include <vector>

#include <Eigen/Dense>

#include "dfmvi/errors.hpp"
#include "dfmvi/linalg.hpp"

namespace dfmvi {

/// Dimensions of the dynamic factor model.
/// n variables, r dynamic factors loading at lags 0..p, static state size s = r(p+1).
struct ModelSpec {
  int n = 1;
  int r = 1;
  int p = 0;

  int s() const { return r * (p + 1); }

  void validate() const {
    if (n < 1) throw DomainError("n must be >= 1");
    if (r < 1) throw DomainError("r must be >= 1");
    if (p < 0) throw DomainError("p must be >= 0");
  }

  bool operator==(const ModelSpec&) const = default;
};

/// Prior hyperparameters. Loadings and the transition matrix carry Gaussian
/// priors stored by their precision matrices.
struct PriorSpec {
  MatrixXd V_inv;     // s x s loading precision
  MatrixXd W_inv;     // s x s transition precision
  MatrixXd Sigma_F0;  // s x s origin state covariance
  VectorXd nu;        // prior degrees of freedom, per variable
  VectorXd tau2;      // prior scales, per variable
};

struct MinnesotaPrior {
  MatrixXd V_inv;
  MatrixXd W_inv;
};

namespace detail {
inline MatrixXd lag_decay_precision(int r, int p, double eta, double ell) {
  const int s = r * (p + 1);
  MatrixXd out = MatrixXd::Zero(s, s);
  for (int lag = 0; lag <= p; ++lag) {
    const double w = eta * std::pow(static_cast<double>(lag + 1), ell);
    for (int k = 0; k < r; ++k) out(lag * r + k, lag * r + k) = w;
  }
  return out;
}
}  // namespace detail

/// Minnesota-style precisions: block j (lag j, r factors) gets eta * (j+1)^ell.
/// The result is diagonal with equal entries within each lag block.
inline MinnesotaPrior minnesota_prior(const ModelSpec& spec, double eta_lambda, double eta_phi,
                                      double ell_lambda, double ell_phi) {
  spec.validate();
  if (!(eta_lambda > 0.0) || !(eta_phi > 0.0)) throw DomainError("overall shrinkage eta must be positive");
  if (!(ell_lambda > 1.0) || !(ell_phi > 1.0)) throw DomainError("lag decay ell must exceed 1");
  return {detail::lag_decay_precision(spec.r, spec.p, eta_lambda, ell_lambda),
          detail::lag_decay_precision(spec.r, spec.p, eta_phi, ell_phi)};
}

struct PriorHyperparameters {
  double eta_lambda = 1.0;
  double eta_phi = 1.0;
  double ell_lambda = 2.0;
  double ell_phi = 2.0;
  double nu = 1.0;
  double tau2 = 1.0;
  double sigma_f0 = 1.0;  // Sigma_F0 = sigma_f0 * I_s
};

inline PriorSpec make_prior(const ModelSpec& spec, const PriorHyperparameters& h = {}) {
  auto mn = minnesota_prior(spec, h.eta_lambda, h.eta_phi, h.ell_lambda, h.ell_phi);
  PriorSpec prior;
  prior.V_inv = mn.V_inv;
  prior.W_inv = mn.W_inv;
  if (!(h.sigma_f0 > 0.0)) throw DomainError("sigma_f0 must be positive");
  prior.Sigma_F0 = h.sigma_f0 * MatrixXd::Identity(spec.s(), spec.s());
  prior.nu = VectorXd::Constant(spec.n, h.nu);
  prior.tau2 = VectorXd::Constant(spec.n, h.tau2);
  return prior;
}

/// Checks dimensions and definiteness; returns a copy with symmetrized matrices.
/// Improper priors (singular precisions, nu_i or tau2_i not positive) are rejected,
/// since the evidence lower bound is undefined for them.
inline PriorSpec validate_prior(const PriorSpec& prior, const ModelSpec& spec) {
  spec.validate();
  const int s = spec.s();
  auto check_square = [s](const MatrixXd& m, const char* name) {
    if (m.rows() != s || m.cols() != s)
      throw StructuralError(std::string(name) + " must be " + std::to_string(s) + "x" + std::to_string(s));
  };
  check_square(prior.V_inv, "V_inv");
  check_square(prior.W_inv, "W_inv");
  check_square(prior.Sigma_F0, "Sigma_F0");
  if (prior.nu.size() != spec.n || prior.tau2.size() != spec.n)
    throw StructuralError("nu and tau2 must have length n = " + std::to_string(spec.n));
  for (int i = 0; i < spec.n; ++i) {
    if (!(prior.nu(i) > 0.0)) throw DomainError("nu must be positive (improper prior)");
    if (!(prior.tau2(i) > 0.0)) throw DomainError("tau2 must be positive (improper prior)");
  }
  PriorSpec out;
  out.V_inv = linalg::symmetrize(prior.V_inv);
  out.W_inv = linalg::symmetrize(prior.W_inv);
  out.Sigma_F0 = linalg::symmetrize(prior.Sigma_F0);
  out.nu = prior.nu;
  out.tau2 = prior.tau2;
  if (!linalg::is_positive_semidefinite(out.V_inv)) throw DomainError("V_inv is not positive semidefinite");
  if (!linalg::is_positive_semidefinite(out.W_inv)) throw DomainError("W_inv is not positive semidefinite");
  if (!linalg::is_positive_definite(out.V_inv)) throw DomainError("V_inv is singular (improper prior)");
  if (!linalg::is_positive_definite(out.W_inv)) throw DomainError("W_inv is singular (improper prior)");
  if (!linalg::is_positive_definite(out.Sigma_F0)) throw DomainError("Sigma_F0 is not positive definite");
  return out;
}

/// One identifying variable per factor: its loadings are zero except the
/// contemporaneous loading on `factor`, whose sign is fixed (+1 or -1).
struct IdentificationRule {
  int variable = 0;
  int factor = 0;
  int sign = 1;
  bool operator==(const IdentificationRule&) const = default;
};

struct Identification {
  std::vector<IdentificationRule> rules;

  bool empty() const { return rules.empty(); }

  void validate(const ModelSpec& spec) const {
    std::vector<bool> seen_var(spec.n, false);
    for (const auto& rule : rules) {
      if (rule.variable < 0 || rule.variable >= spec.n)
        throw DomainError("identification variable index out of range");
      if (rule.factor < 0 || rule.factor >= spec.r) throw DomainError("identification factor index out of range");
      if (rule.sign != 1 && rule.sign != -1) throw DomainError("identification sign must be +1 or -1");
      if (seen_var[rule.variable]) throw DomainError("variable restricted twice in identification");
      seen_var[rule.variable] = true;
    }
  }

  /// Per variable, the loading indices (into the s-vector) that are free.
  std::vector<std::vector<int>> free_indices(const ModelSpec& spec) const {
    std::vector<std::vector<int>> free(spec.n);
    for (int i = 0; i < spec.n; ++i)
      for (int k = 0; k < spec.s(); ++k) free[i].push_back(k);
    for (const auto& rule : rules) free[rule.variable] = {rule.factor};
    return free;
  }

  /// Per variable, the loading index with a sign restriction, or -1.
  std::vector<int> positive_index(const ModelSpec& spec) const {
    std::vector<int> pos(spec.n, -1);
    for (const auto& rule : rules) pos[rule.variable] = rule.factor;
    return pos;
  }

  /// Per variable, the required sign of the restricted loading (0 when unrestricted).
  std::vector<int> signs(const ModelSpec& spec) const {
    std::vector<int> out(spec.n, 0);
    for (const auto& rule : rules) out[rule.variable] = rule.sign;
    return out;
  }

  bool operator==(const Identification&) const = default;
};

/// Companion transition: top r rows hold the r x s coefficient matrix,
/// the lower (s-r) x s block is [I_{rp} 0].
inline MatrixXd companion(const MatrixXd& top, int r, int p) {
  const int s = r * (p + 1);
  if (top.rows() != r || top.cols() != s) throw StructuralError("transition matrix must be r x s");
  MatrixXd out = MatrixXd::Zero(s, s);
  out.topRows(r) = top;
  if (p > 0) out.bottomLeftCorner(r * p, r * p).setIdentity();
  return out;
}

}  // namespace dfmvi
