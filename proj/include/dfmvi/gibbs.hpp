#pragma once

#include <chrono>
#include <cmath>
#include <cstdint>
#include <cstring>
#include <fstream>
#include <string>
#include <vector>

#include <Eigen/Dense>

#include "dfmvi/errors.hpp"
#include "dfmvi/linalg.hpp"
#include "dfmvi/model.hpp"
#include "dfmvi/panel.hpp"
#include "dfmvi/random.hpp"
#include "dfmvi/statespace.hpp"
#include "dfmvi/vi.hpp"

namespace dfmvi {

struct GibbsConfig {
  long n_draws = 200000;
  double burn_in_fraction = 0.10;
  int thin = 1;
  std::uint64_t seed = 1;
  Identification identification;
  int max_rejections = 1000;

  long burn_in() const { return static_cast<long>(std::floor(burn_in_fraction * static_cast<double>(n_draws))); }

  void validate() const {
    if (n_draws < 1) throw DomainError("n_draws must be >= 1");
    if (!(burn_in_fraction >= 0.0 && burn_in_fraction < 1.0)) throw DomainError("burn-in fraction must lie in [0, 1)");
    if (burn_in() >= n_draws) throw DomainError("burn-in leaves no draws");
    if (thin < 1) throw DomainError("thinning factor must be >= 1");
    if (max_rejections < 1) throw DomainError("max_rejections must be >= 1");
  }
};

struct ThetaDraw {
  MatrixXd Lambda;  // n x s
  VectorXd sigma2;  // n
  MatrixXd Phi;     // r x s
};

struct Draw {
  ThetaDraw theta;
  MatrixXd F;  // (T+1) x s, row t holds F_t'
};

struct DrawStore {
  ModelSpec spec;
  int T = 0;
  std::uint64_t seed = 0;
  std::vector<Draw> draws;
  long sign_rejections = 0;  // redraws caused by sign restrictions
  long sign_attempts = 0;
  double wall_seconds = 0.0;
};

namespace detail {

inline std::vector<VectorXd> rows_to_path(const MatrixXd& F) {
  std::vector<VectorXd> path(F.rows());
  for (Eigen::Index t = 0; t < F.rows(); ++t) path[t] = F.row(t).transpose();
  return path;
}

inline MatrixXd path_to_rows(const std::vector<VectorXd>& path) {
  MatrixXd F(path.size(), path.empty() ? 0 : path.front().size());
  for (std::size_t t = 0; t < path.size(); ++t) F.row(t) = path[t].transpose();
  return F;
}

}  // namespace detail

/// Forward filtering, backward sampling of F_0..F_T given theta. The state at
/// t = 0 has the prior N(0, Sigma_F0).
inline std::vector<VectorXd> sample_states_ffbs(const TimeSeriesPanel& panel, const ThetaDraw& theta,
                                                const PriorSpec& prior, const ModelSpec& spec, Rng& rng) {
  const MatrixXd Mt = companion(theta.Phi, spec.r, spec.p);
  FilterOutput f = kalman_filter_direct(panel, theta.Lambda, theta.sigma2, Mt, prior.Sigma_F0, spec.r);
  return backward_sample(f, Mt, spec.r, rng);
}

/// Conjugate draws of (lambda_i, sigma2_i) per equation and of Phi, given a state path.
/// Sign-restricted loadings are enforced by redrawing (sigma2_i, lambda_i) jointly.
inline ThetaDraw sample_parameters(const TimeSeriesPanel& panel, const std::vector<VectorXd>& F,
                                   const PriorSpec& prior, const ModelSpec& spec,
                                   const std::vector<EquationPrior>& eq, const std::vector<int>& sign_index,
                                   const std::vector<int>& signs, Rng& rng, int max_rejections = 1000,
                                   long* rejections = nullptr) {
  const int n = spec.n, r = spec.r, s = spec.s();
  const int T = static_cast<int>(panel.T());
  ThetaDraw th;
  th.Lambda = MatrixXd::Zero(n, s);
  th.sigma2.resize(n);
  for (int i = 0; i < n; ++i) {
    const auto& K = eq[i].free;
    const int k = static_cast<int>(K.size());
    MatrixXd prec = eq[i].V_inv;
    VectorXd b = VectorXd::Zero(k);
    VectorXd x(k);
    double yy = 0.0;
    int Ti = 0;
    for (int t = 1; t <= T; ++t) {
      if (!panel.available(t - 1, i)) continue;
      for (int a = 0; a < k; ++a) x(a) = F[t](K[a]);
      const double y = panel.value(t - 1, i);
      prec.noalias() += x * x.transpose();
      b += y * x;
      yy += y * y;
      ++Ti;
    }
    auto llt = linalg::cholesky(prec, "loading posterior precision of variable " + std::to_string(i));
    const VectorXd mu = llt.solve(b);
    const double nu_post = prior.nu(i) + Ti;
    const double scale = (prior.nu(i) * prior.tau2(i) + yy - mu.dot(b)) / nu_post;
    if (!(scale > 0.0)) throw NumericalError("nonpositive posterior scale for variable " + std::to_string(i));
    const int pos = sign_index[i];
    int pos_local = -1;
    for (int a = 0; a < k; ++a)
      if (K[a] == pos) pos_local = a;
    int attempt = 0;
    for (;; ++attempt) {
      if (attempt >= max_rejections)
        throw DomainError("sign restriction on variable " + std::to_string(i) + " rejected " +
                          std::to_string(max_rejections) +
                          " consecutive draws; choose a different identifying variable");
      const double sig2 = rng.scaled_inv_chi_squared(nu_post, scale);
      // lambda ~ N(mu, sig2 prec^{-1}): mu + sqrt(sig2) L^{-T} z
      VectorXd z = rng.normal_vector(k);
      VectorXd lam = llt.matrixU().solve(z);
      lam = mu + std::sqrt(sig2) * lam;
      if (pos_local >= 0 && signs[i] * lam(pos_local) <= 0.0) continue;
      th.sigma2(i) = sig2;
      for (int a = 0; a < k; ++a) th.Lambda(i, K[a]) = lam(a);
      break;
    }
    if (rejections) *rejections += attempt;
  }
  MatrixXd S00 = prior.W_inv;
  MatrixXd S10 = MatrixXd::Zero(r, s);
  for (int t = 1; t <= T; ++t) {
    S00.noalias() += F[t - 1] * F[t - 1].transpose();
    S10.noalias() += F[t].head(r) * F[t - 1].transpose();
  }
  auto lw = linalg::cholesky(linalg::symmetrize(S00), "transition posterior precision");
  const MatrixXd Sigma_phi = lw.solve(MatrixXd::Identity(s, s));
  const MatrixXd M = S10 * Sigma_phi;
  // Phi = M + Z L^{-1} with S00 = L L' gives row covariance S00^{-1}
  MatrixXd Z = rng.normal_matrix(r, s);
  MatrixXd ZLinv = lw.matrixU().solve(Z.transpose()).transpose();
  th.Phi = M + ZLinv;
  return th;
}

/// Gibbs sampler alternating FFBS state draws with conjugate parameter draws.
/// Starts from the principal-component initialization; burn-in draws are discarded
/// and every `thin`-th remaining draw is stored.
inline DrawStore run_gibbs(const TimeSeriesPanel& panel, const ModelSpec& spec, const PriorSpec& prior_in,
                           const GibbsConfig& cfg, const ThetaDraw* start = nullptr) {
  const auto t0 = std::chrono::steady_clock::now();
  detail::check_fit_inputs(panel, spec);
  cfg.validate();
  cfg.identification.validate(spec);
  const PriorSpec prior = validate_prior(prior_in, spec);
  const auto eq = equation_priors(prior, spec, cfg.identification);
  const auto sign_index = cfg.identification.positive_index(spec);
  const auto signs = cfg.identification.signs(spec);

  ThetaDraw theta;
  if (start) {
    theta = *start;
  } else {
    VariationalState init = init_from_pca(panel, spec, prior, cfg.identification, derive_seed(cfg.seed, 0));
    theta.Lambda = init.loadings.M_Lambda();
    theta.sigma2 = init.loadings.tau2_sigma;
    theta.Phi = init.transition.M_phi;
  }
  Rng rng(derive_seed(cfg.seed, 1));
  DrawStore store;
  store.spec = spec;
  store.T = static_cast<int>(panel.T());
  store.seed = cfg.seed;
  const long burn = cfg.burn_in();
  store.draws.reserve(static_cast<std::size_t>((cfg.n_draws - burn + cfg.thin - 1) / cfg.thin));
  for (long d = 0; d < cfg.n_draws; ++d) {
    auto F = sample_states_ffbs(panel, theta, prior, spec, rng);
    long rej = 0;
    theta = sample_parameters(panel, F, prior, spec, eq, sign_index, signs, rng, cfg.max_rejections, &rej);
    store.sign_rejections += rej;
    store.sign_attempts += rej + spec.n;
    if (d >= burn && (d - burn) % cfg.thin == 0) store.draws.push_back({theta, detail::path_to_rows(F)});
  }
  store.wall_seconds = std::chrono::duration<double>(std::chrono::steady_clock::now() - t0).count();
  return store;
}

// draws.bin layout (little-endian host order):
//   8 bytes magic "DFMVIDRW", u32 version = 1,
//   u64 n, r, p, s, T, D, seed,
//   then D records of doubles: Lambda (n x s, row-major), sigma2 (n),
//   Phi (r x s, row-major), F ((T+1) x s, row-major).
inline constexpr char kDrawMagic[8] = {'D', 'F', 'M', 'V', 'I', 'D', 'R', 'W'};
inline constexpr std::uint32_t kDrawVersion = 1;

inline void write_draws_bin(const DrawStore& store, const std::string& path) {
  std::ofstream out(path, std::ios::binary);
  if (!out) throw ParseError("cannot write draws file: " + path);
  const auto& sp = store.spec;
  out.write(kDrawMagic, 8);
  out.write(reinterpret_cast<const char*>(&kDrawVersion), sizeof(kDrawVersion));
  const std::uint64_t hdr[7] = {static_cast<std::uint64_t>(sp.n), static_cast<std::uint64_t>(sp.r),
                                static_cast<std::uint64_t>(sp.p), static_cast<std::uint64_t>(sp.s()),
                                static_cast<std::uint64_t>(store.T), store.draws.size(), store.seed};
  out.write(reinterpret_cast<const char*>(hdr), sizeof(hdr));
  std::vector<double> buf;
  for (const auto& d : store.draws) {
    buf.clear();
    for (int i = 0; i < sp.n; ++i)
      for (int k = 0; k < sp.s(); ++k) buf.push_back(d.theta.Lambda(i, k));
    for (int i = 0; i < sp.n; ++i) buf.push_back(d.theta.sigma2(i));
    for (int k = 0; k < sp.r; ++k)
      for (int j = 0; j < sp.s(); ++j) buf.push_back(d.theta.Phi(k, j));
    for (int t = 0; t <= store.T; ++t)
      for (int j = 0; j < sp.s(); ++j) buf.push_back(d.F(t, j));
    out.write(reinterpret_cast<const char*>(buf.data()), static_cast<std::streamsize>(buf.size() * sizeof(double)));
  }
  if (!out) throw ParseError("failed writing draws file: " + path);
}

inline DrawStore read_draws_bin(const std::string& path) {
  std::ifstream in(path, std::ios::binary);
  if (!in) throw ParseError("cannot open draws file: " + path);
  char magic[8];
  std::uint32_t version = 0;
  std::uint64_t hdr[7];
  in.read(magic, 8);
  in.read(reinterpret_cast<char*>(&version), sizeof(version));
  in.read(reinterpret_cast<char*>(hdr), sizeof(hdr));
  if (!in || std::memcmp(magic, kDrawMagic, 8) != 0) throw ParseError("not a draws file: " + path);
  if (version != kDrawVersion) throw ParseError("unsupported draws file version " + std::to_string(version));
  DrawStore store;
  store.spec = {static_cast<int>(hdr[0]), static_cast<int>(hdr[1]), static_cast<int>(hdr[2])};
  if (static_cast<std::uint64_t>(store.spec.s()) != hdr[3]) throw ParseError("inconsistent draws header");
  store.T = static_cast<int>(hdr[4]);
  store.seed = hdr[6];
  const int n = store.spec.n, r = store.spec.r, s = store.spec.s(), T = store.T;
  const std::size_t rec = static_cast<std::size_t>(n * s + n + r * s + (T + 1) * s);
  std::vector<double> buf(rec);
  store.draws.resize(hdr[5]);
  for (auto& d : store.draws) {
    in.read(reinterpret_cast<char*>(buf.data()), static_cast<std::streamsize>(rec * sizeof(double)));
    if (!in) throw ParseError("truncated draws file: " + path);
    std::size_t k = 0;
    d.theta.Lambda.resize(n, s);
    for (int i = 0; i < n; ++i)
      for (int j = 0; j < s; ++j) d.theta.Lambda(i, j) = buf[k++];
    d.theta.sigma2.resize(n);
    for (int i = 0; i < n; ++i) d.theta.sigma2(i) = buf[k++];
    d.theta.Phi.resize(r, s);
    for (int a = 0; a < r; ++a)
      for (int j = 0; j < s; ++j) d.theta.Phi(a, j) = buf[k++];
    d.F.resize(T + 1, s);
    for (int t = 0; t <= T; ++t)
      for (int j = 0; j < s; ++j) d.F(t, j) = buf[k++];
  }
  return store;
}

/// Parameter draws as CSV, one row per stored draw (states are only in the binary file).
inline void write_draws_csv(const DrawStore& store, const std::string& path) {
  std::ofstream out(path);
  if (!out) throw ParseError("cannot write draws file: " + path);
  const auto& sp = store.spec;
  out << "draw";
  for (int i = 0; i < sp.n; ++i)
    for (int k = 0; k < sp.s(); ++k) out << ",lambda_" << i << '_' << k;
  for (int i = 0; i < sp.n; ++i) out << ",sigma2_" << i;
  for (int a = 0; a < sp.r; ++a)
    for (int j = 0; j < sp.s(); ++j) out << ",phi_" << a << '_' << j;
  out << '\n';
  for (std::size_t d = 0; d < store.draws.size(); ++d) {
    const auto& th = store.draws[d].theta;
    out << d;
    for (int i = 0; i < sp.n; ++i)
      for (int k = 0; k < sp.s(); ++k) out << ',' << detail::format_double(th.Lambda(i, k));
    for (int i = 0; i < sp.n; ++i) out << ',' << detail::format_double(th.sigma2(i));
    for (int a = 0; a < sp.r; ++a)
      for (int j = 0; j < sp.s(); ++j) out << ',' << detail::format_double(th.Phi(a, j));
    out << '\n';
  }
}

}  // namespace dfmvi
