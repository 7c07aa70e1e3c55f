#pragma once

#include <filesystem>
#include <string>

#include "dfmvi/dfmvi.hpp"

namespace dfmvi::testing {

/// Small random problem: panel with an arbitrary mask and a valid variational state.
struct Instance {
  ModelSpec spec;
  TimeSeriesPanel panel;
  PriorSpec prior;
  VariationalState q;
};

inline TimeSeriesPanel random_mask_panel(const MatrixXd& values, Rng& rng, double rate, bool blank_row) {
  Mask mask(values.rows(), values.cols());
  for (Eigen::Index t = 0; t < values.rows(); ++t)
    for (Eigen::Index i = 0; i < values.cols(); ++i) mask(t, i) = rng.uniform() >= rate;
  if (blank_row) mask.row(static_cast<Eigen::Index>(rng.uniform() * values.rows())).setConstant(false);
  return TimeSeriesPanel(values, mask, {});
}

/// Random q(theta) with nu_sigma = nu + T_i, as produced by any loading update.
inline VariationalState random_state(const TimeSeriesPanel& panel, const ModelSpec& spec, const PriorSpec& prior,
                                     Rng& rng) {
  const int s = spec.s();
  VariationalState q;
  const auto counts = availability_summary(panel).counts;
  q.loadings.nu_sigma.resize(spec.n);
  q.loadings.tau2_sigma.resize(spec.n);
  for (int i = 0; i < spec.n; ++i) {
    q.loadings.mu.push_back(rng.normal_vector(s));
    MatrixXd A = rng.normal_matrix(s, s);
    q.loadings.Sigma.push_back(0.2 * A * A.transpose() + 0.1 * MatrixXd::Identity(s, s));
    q.loadings.nu_sigma(i) = prior.nu(i) + counts(i);
    q.loadings.tau2_sigma(i) = 0.2 + 0.8 * rng.uniform();
  }
  q.transition.M_phi = 0.5 * rng.normal_matrix(spec.r, s);
  MatrixXd B = rng.normal_matrix(s, s);
  q.transition.Sigma_phi = 0.05 * B * B.transpose() + 0.05 * MatrixXd::Identity(s, s);
  return q;
}

inline Instance random_instance(std::uint64_t seed, int n, int T, int r, int p, double miss_rate = 0.3) {
  Rng rng(seed);
  Instance in;
  in.spec = ModelSpec{n, r, p};
  in.panel = random_mask_panel(rng.normal_matrix(T, n), rng, miss_rate, rng.uniform() < 0.5);
  PriorHyperparameters h;
  h.tau2 = 0.5 + rng.uniform();
  h.sigma_f0 = 0.5 + rng.uniform();
  in.prior = make_prior(in.spec, h);
  in.q = random_state(in.panel, in.spec, in.prior, rng);
  return in;
}

inline DenseSystem dense_system(const StatePass& pass, const VariationalState& q, int r) {
  return DenseSystem{pass.params.M_tilde, pass.params.P0, r, q.loadings.M_Lambda(), q.loadings.tau2_sigma,
                     pass.sigma_theta};
}

/// Largest absolute difference over means, second moments and lag-one cross moments.
inline double moment_gap(const StateMoments& a, const DenseMoments& b) {
  double err = 0.0;
  for (int t = 0; t <= a.T(); ++t) {
    err = std::max(err, (a.mean[t] - b.mean[t]).cwiseAbs().maxCoeff());
    err = std::max(err, (a.second[t] - b.second[t]).cwiseAbs().maxCoeff());
    if (t > 0) err = std::max(err, (a.lag_cross[t] - b.lag_cross[t]).cwiseAbs().maxCoeff());
  }
  return err;
}

inline double moment_gap(const StateMoments& a, const StateMoments& b) {
  double err = 0.0;
  for (int t = 0; t <= a.T(); ++t) {
    err = std::max(err, (a.mean[t] - b.mean[t]).cwiseAbs().maxCoeff());
    err = std::max(err, (a.second[t] - b.second[t]).cwiseAbs().maxCoeff());
    if (t > 0) err = std::max(err, (a.lag_cross[t] - b.lag_cross[t]).cwiseAbs().maxCoeff());
  }
  return err;
}

inline McVariational mc_view(const VariationalState& q, const ModelSpec& spec, const Identification& id) {
  return McVariational{q.loadings.mu,   q.loadings.Sigma,       q.loadings.nu_sigma, q.loadings.tau2_sigma,
                       q.transition.M_phi, q.transition.Sigma_phi, id.free_indices(spec)};
}

/// Simulated small-model panel: r = 1, p = 0, random and ragged-edge missingness.
inline SimResult small_model_panel(std::uint64_t seed, int n, int T, double miss_rate) {
  Rng rng(seed);
  ModelSpec spec{n, 1, 0};
  SimConfig cfg;
  cfg.spec = spec;
  cfg.truth = random_parameters(spec, rng, 1.0, 0.3, 1.0, 0.8);
  cfg.truth.Lambda(0, 0) = std::abs(cfg.truth.Lambda(0, 0)) + 0.5;
  cfg.T = T;
  cfg.missing.random_rate = miss_rate;
  for (int i = 0; i < n; ++i) cfg.missing.ragged.push_back(i % 4);
  cfg.seed = derive_seed(seed, 1);
  return simulate_dfm(cfg);
}

inline std::filesystem::path scratch_dir(const std::string& name) {
  auto dir = std::filesystem::temp_directory_path() / ("dfmvi_test_" + name);
  std::filesystem::remove_all(dir);
  std::filesystem::create_directories(dir);
  return dir;
}

}  // namespace dfmvi::testing
