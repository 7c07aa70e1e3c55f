#pragma once

#include <chrono>
#include <cstdint>
#include <filesystem>
#include <fstream>
#include <iostream>
#include <optional>
#include <set>
#include <sstream>
#include <string>
#include <vector>

#include "CLI11.hpp"
#include "json.hpp"

#include "dfmvi/errors.hpp"
#include "dfmvi/forecast.hpp"
#include "dfmvi/gibbs.hpp"
#include "dfmvi/model.hpp"
#include "dfmvi/panel.hpp"
#include "dfmvi/sim.hpp"
#include "dfmvi/vi.hpp"

namespace dfmvi {

/// Identification rule as written in a config file: variable by name.
struct NamedRule {
  std::string variable;
  int factor = 0;
  int sign = 1;
};

struct RunConfig {
  std::string command;
  std::string input;
  std::string out_dir;
  std::string config_path;
  std::string fit_dir;
  std::string gibbs_dir;

  int r = 1;
  int p = 0;
  PriorHyperparameters hyper;
  std::vector<double> eta_lambda_grid;
  std::vector<NamedRule> identification;
  bool standardize = true;
  std::string missing_token;

  double tolerance = 1e-7;
  int max_iters = 1000;
  std::uint64_t seed = 1;
  long draws = 200000;
  double burn_in = 0.10;
  int thin = 1;
  int horizons = 4;
  int smf_draws = 10000;

  // simulate
  int n = 10;
  int T = 100;
  double missing_rate = 0.0;
  int ragged_max = 0;
  std::vector<int> stride;
  double loading_scale = 1.0;
  double sigma2_min = 0.2;
  double sigma2_max = 1.0;
  double spectral_radius = 0.7;
};

namespace cli {

inline const std::set<std::string>& config_keys() {
  static const std::set<std::string> keys = {
      "r", "p", "eta_lambda", "eta_phi", "ell_lambda", "ell_phi", "nu", "tau2", "sigma_f0",
      "eta_lambda_grid", "identification", "standardize", "missing_token", "tolerance", "max_iters",
      "seed", "draws", "burn_in", "thin", "horizons", "smf_draws", "n", "T", "missing_rate",
      "ragged_max", "stride", "loading_scale", "sigma2_min", "sigma2_max", "spectral_radius"};
  return keys;
}

template <class T>
void read_key(const nlohmann::json& j, const char* key, T& dst) {
  if (!j.contains(key)) return;
  try {
    dst = j.at(key).get<T>();
  } catch (const nlohmann::json::exception& e) {
    throw ParseError(std::string("config key '") + key + "': " + e.what());
  }
}

inline void apply_config_json(const nlohmann::json& j, RunConfig& c) {
  if (!j.is_object()) throw ParseError("config must be a JSON object");
  for (const auto& [key, _] : j.items())
    if (!config_keys().count(key)) throw ParseError("unknown config key: " + key);
  read_key(j, "r", c.r);
  read_key(j, "p", c.p);
  read_key(j, "eta_lambda", c.hyper.eta_lambda);
  read_key(j, "eta_phi", c.hyper.eta_phi);
  read_key(j, "ell_lambda", c.hyper.ell_lambda);
  read_key(j, "ell_phi", c.hyper.ell_phi);
  read_key(j, "nu", c.hyper.nu);
  read_key(j, "tau2", c.hyper.tau2);
  read_key(j, "sigma_f0", c.hyper.sigma_f0);
  read_key(j, "eta_lambda_grid", c.eta_lambda_grid);
  read_key(j, "standardize", c.standardize);
  read_key(j, "missing_token", c.missing_token);
  read_key(j, "tolerance", c.tolerance);
  read_key(j, "max_iters", c.max_iters);
  read_key(j, "seed", c.seed);
  read_key(j, "draws", c.draws);
  read_key(j, "burn_in", c.burn_in);
  read_key(j, "thin", c.thin);
  read_key(j, "horizons", c.horizons);
  read_key(j, "smf_draws", c.smf_draws);
  read_key(j, "n", c.n);
  read_key(j, "T", c.T);
  read_key(j, "missing_rate", c.missing_rate);
  read_key(j, "ragged_max", c.ragged_max);
  read_key(j, "stride", c.stride);
  read_key(j, "loading_scale", c.loading_scale);
  read_key(j, "sigma2_min", c.sigma2_min);
  read_key(j, "sigma2_max", c.sigma2_max);
  read_key(j, "spectral_radius", c.spectral_radius);
  if (j.contains("identification")) {
    const auto& ids = j.at("identification");
    if (!ids.is_array()) throw ParseError("identification must be an array");
    c.identification.clear();
    for (const auto& e : ids) {
      NamedRule rule;
      try {
        rule.variable = e.at("variable").get<std::string>();
        rule.factor = e.at("factor").get<int>();
        rule.sign = e.value("sign", 1);
      } catch (const nlohmann::json::exception& ex) {
        throw ParseError(std::string("identification entry: ") + ex.what());
      }
      c.identification.push_back(rule);
    }
  }
}

inline void load_config_file(const std::string& path, RunConfig& c) {
  std::ifstream in(path);
  if (!in) throw ParseError("cannot open config file: " + path);
  nlohmann::json j;
  try {
    j = nlohmann::json::parse(in);
  } catch (const nlohmann::json::exception& e) {
    throw ParseError("config file " + path + ": " + e.what());
  }
  apply_config_json(j, c);
}

/// Parses "name:factor[:sign]".
inline NamedRule parse_rule(const std::string& text) {
  auto a = text.rfind(':');
  if (a == std::string::npos || a == 0) throw ParseError("identification must be name:factor[:sign]: " + text);
  NamedRule rule;
  auto b = text.rfind(':', a - 1);
  try {
    if (b != std::string::npos && b > 0) {
      rule.variable = text.substr(0, b);
      rule.factor = std::stoi(text.substr(b + 1, a - b - 1));
      rule.sign = std::stoi(text.substr(a + 1));
    } else {
      rule.variable = text.substr(0, a);
      rule.factor = std::stoi(text.substr(a + 1));
    }
  } catch (const std::exception&) {
    throw ParseError("identification must be name:factor[:sign]: " + text);
  }
  return rule;
}

inline std::uint64_t fnv1a(std::string_view s, std::uint64_t h = 1469598103934665603ULL) {
  for (unsigned char ch : s) {
    h ^= ch;
    h *= 1099511628211ULL;
  }
  return h;
}

inline std::string hex64(std::uint64_t h) {
  char buf[17];
  std::snprintf(buf, sizeof(buf), "%016llx", static_cast<unsigned long long>(h));
  return buf;
}

inline std::string panel_fingerprint(const TimeSeriesPanel& panel) {
  std::string s;
  for (const auto& name : panel.names()) s += name + ",";
  s += "\n";
  for (Eigen::Index t = 0; t < panel.T(); ++t) {
    for (Eigen::Index i = 0; i < panel.n(); ++i)
      s += (panel.available(t, i) ? detail::format_double(panel.value(t, i)) : std::string("NA")) + ",";
    s += "\n";
  }
  return hex64(fnv1a(s));
}

/// The part of a run that determines the posterior: data, model and prior.
inline nlohmann::json model_identity(const RunConfig& c, const TimeSeriesPanel& panel) {
  nlohmann::json ids = nlohmann::json::array();
  for (const auto& rule : c.identification)
    ids.push_back({{"variable", rule.variable}, {"factor", rule.factor}, {"sign", rule.sign}});
  return {{"panel", panel_fingerprint(panel)},
          {"T", panel.T()},
          {"n", panel.n()},
          {"r", c.r},
          {"p", c.p},
          {"eta_lambda", c.hyper.eta_lambda},
          {"eta_phi", c.hyper.eta_phi},
          {"ell_lambda", c.hyper.ell_lambda},
          {"ell_phi", c.hyper.ell_phi},
          {"nu", c.hyper.nu},
          {"tau2", c.hyper.tau2},
          {"sigma_f0", c.hyper.sigma_f0},
          {"standardize", c.standardize},
          {"identification", ids}};
}

inline std::string config_hash(const nlohmann::json& identity) { return hex64(fnv1a(identity.dump())); }

inline nlohmann::json config_echo(const RunConfig& c) {
  nlohmann::json ids = nlohmann::json::array();
  for (const auto& rule : c.identification)
    ids.push_back({{"variable", rule.variable}, {"factor", rule.factor}, {"sign", rule.sign}});
  return {{"command", c.command},
          {"input", c.input},
          {"r", c.r},
          {"p", c.p},
          {"eta_lambda", c.hyper.eta_lambda},
          {"eta_phi", c.hyper.eta_phi},
          {"ell_lambda", c.hyper.ell_lambda},
          {"ell_phi", c.hyper.ell_phi},
          {"nu", c.hyper.nu},
          {"tau2", c.hyper.tau2},
          {"sigma_f0", c.hyper.sigma_f0},
          {"eta_lambda_grid", c.eta_lambda_grid},
          {"identification", ids},
          {"standardize", c.standardize},
          {"missing_token", c.missing_token},
          {"tolerance", c.tolerance},
          {"max_iters", c.max_iters},
          {"seed", c.seed},
          {"draws", c.draws},
          {"burn_in", c.burn_in},
          {"thin", c.thin},
          {"horizons", c.horizons},
          {"smf_draws", c.smf_draws}};
}

inline void write_json(const nlohmann::json& j, const std::filesystem::path& path) {
  std::ofstream out(path);
  if (!out) throw ParseError("cannot write " + path.string());
  out << j.dump(2) << '\n';
}

inline nlohmann::json read_json(const std::filesystem::path& path) {
  std::ifstream in(path);
  if (!in) throw ParseError("cannot open " + path.string());
  try {
    return nlohmann::json::parse(in);
  } catch (const nlohmann::json::exception& e) {
    throw ParseError(path.string() + ": " + e.what());
  }
}

/// Loaded panel on the scale used for estimation.
struct PreparedData {
  TimeSeriesPanel raw;
  TimeSeriesPanel panel;
  std::optional<StandardizationRecord> record;
  ModelSpec spec;
  PriorSpec prior;
  Identification id;
  nlohmann::json identity;
  std::string hash;
};

inline PreparedData prepare(const RunConfig& c) {
  PreparedData d;
  d.raw = load_csv(c.input, c.missing_token);
  if (c.standardize) {
    auto [z, rec] = dfmvi::standardize(d.raw);
    d.panel = std::move(z);
    d.record = std::move(rec);
  } else {
    d.panel = d.raw;
  }
  d.spec = ModelSpec{static_cast<int>(d.panel.n()), c.r, c.p};
  d.spec.validate();
  d.prior = make_prior(d.spec, c.hyper);
  for (const auto& rule : c.identification)
    d.id.rules.push_back({static_cast<int>(d.panel.column_index(rule.variable)), rule.factor, rule.sign});
  d.id.validate(d.spec);
  d.identity = model_identity(c, d.raw);
  d.hash = config_hash(d.identity);
  return d;
}

inline void write_standardization(const PreparedData& d, std::uint64_t seed, const std::filesystem::path& dir) {
  if (!d.record) return;
  nlohmann::json j = *d.record;
  j["config_hash"] = d.hash;
  j["seed"] = seed;
  write_json(j, dir / "standardization.json");
}

inline double seconds_since(std::chrono::steady_clock::time_point t0) {
  return std::chrono::duration<double>(std::chrono::steady_clock::now() - t0).count();
}

inline int cmd_simulate(const RunConfig& c, std::ostream& out) {
  namespace fs = std::filesystem;
  const auto t0 = std::chrono::steady_clock::now();
  ModelSpec spec{c.n, c.r, c.p};
  spec.validate();
  Rng rng(derive_seed(c.seed, 0));
  SimConfig sc;
  sc.spec = spec;
  sc.truth = random_parameters(spec, rng, c.loading_scale, c.sigma2_min, c.sigma2_max, c.spectral_radius);
  sc.T = c.T;
  sc.missing.random_rate = c.missing_rate;
  if (c.ragged_max > 0)
    for (int i = 0; i < c.n; ++i) sc.missing.ragged.push_back(i % (c.ragged_max + 1));
  sc.missing.stride = c.stride;
  sc.seed = derive_seed(c.seed, 1);
  sc.require_stationary = true;
  auto sim = simulate_dfm(sc);
  fs::path dir(c.out_dir);
  write_csv(sim.panel, (dir / "panel.csv").string(), c.missing_token);
  auto truth = truth_to_json(sim, sc.truth);
  truth["seed"] = c.seed;
  truth["config_hash"] = hex64(fnv1a(config_echo(c).dump()));
  write_json(truth, dir / "truth.json");
  nlohmann::json man = {{"command", "simulate"},
                        {"seed", c.seed},
                        {"n", c.n},
                        {"T", c.T},
                        {"r", c.r},
                        {"p", c.p},
                        {"missing_rate", c.missing_rate},
                        {"ragged_max", c.ragged_max},
                        {"stride", c.stride},
                        {"config_hash", hex64(fnv1a(config_echo(c).dump()))},
                        {"wall_seconds", seconds_since(t0)}};
  write_json(man, dir / "manifest.json");
  out << "simulated " << c.T << " x " << c.n << " panel into " << dir.string() << '\n';
  return 0;
}

inline void write_states_csv(const StateMoments& m, int r, const std::filesystem::path& path) {
  std::ofstream out(path);
  if (!out) throw ParseError("cannot write " + path.string());
  out << "t";
  for (int k = 0; k < r; ++k) out << ",mean_f" << k + 1 << ",sd_f" << k + 1;
  out << '\n';
  for (int t = 0; t <= m.T(); ++t) {
    out << t;
    for (int k = 0; k < r; ++k)
      out << ',' << detail::format_double(m.mean[t](k)) << ','
          << detail::format_double(std::sqrt(std::max(0.0, m.cov[t](k, k))));
    out << '\n';
  }
}

inline int cmd_fit(const RunConfig& c, std::ostream& out) {
  namespace fs = std::filesystem;
  const auto t0 = std::chrono::steady_clock::now();
  auto d = prepare(c);
  FitOptions fo;
  fo.tolerance = c.tolerance;
  fo.max_iters = c.max_iters;

  std::vector<double> grid = c.eta_lambda_grid;
  if (grid.empty()) grid.push_back(c.hyper.eta_lambda);
  std::optional<FitResult> best;
  PriorHyperparameters best_hyper = c.hyper;
  nlohmann::json grid_log = nlohmann::json::array();
  for (double eta : grid) {
    auto h = c.hyper;
    h.eta_lambda = eta;
    auto prior = make_prior(d.spec, h);
    auto init = init_from_pca(d.panel, d.spec, prior, d.id, derive_seed(c.seed, 0));
    auto res = fit_smf(d.panel, d.spec, prior, d.id, init, fo);
    const double e = res.elbo.total();
    grid_log.push_back({{"eta_lambda", eta}, {"elbo", e}, {"iterations", res.report.iterations}});
    if (!best || e > best->elbo.total()) {
      best = std::move(res);
      best_hyper = h;
    }
  }
  const auto& res = *best;
  fs::path dir(c.out_dir);

  nlohmann::json var = {{"config_hash", d.hash},
                        {"seed", c.seed},
                        {"model", d.identity},
                        {"eta_lambda", best_hyper.eta_lambda},
                        {"variables", d.panel.names()},
                        {"elbo", res.elbo.total()},
                        {"state", state_to_json(res.state)}};
  write_json(var, dir / "variational.json");
  {
    std::ofstream tr(dir / "elbo_trace.csv");
    if (!tr) throw ParseError("cannot write elbo_trace.csv");
    tr << "iteration,elbo\n";
    for (std::size_t k = 0; k < res.report.elbo_trace.size(); ++k)
      tr << k << ',' << detail::format_double(res.report.elbo_trace[k]) << '\n';
  }
  write_states_csv(res.pass.moments, d.spec.r, dir / "states.csv");
  write_standardization(d, c.seed, dir);

  nlohmann::json man = {{"command", "fit"},
                        {"config", config_echo(c)},
                        {"model", d.identity},
                        {"config_hash", d.hash},
                        {"seed", c.seed},
                        {"iterations", res.report.iterations},
                        {"converged", res.report.converged},
                        {"criteria", res.report.criteria},
                        {"elbo", res.elbo.total()},
                        {"eta_lambda", best_hyper.eta_lambda},
                        {"grid", grid_log},
                        {"fit_seconds", res.report.wall_seconds},
                        {"wall_seconds", seconds_since(t0)}};
  write_json(man, dir / "manifest.json");
  out << "fit: " << res.report.iterations << " iterations, elbo " << detail::format_double(res.elbo.total())
      << (res.report.converged ? "" : " (not converged)") << '\n';
  return 0;
}

inline int cmd_gibbs(const RunConfig& c, std::ostream& out) {
  namespace fs = std::filesystem;
  const auto t0 = std::chrono::steady_clock::now();
  auto d = prepare(c);
  GibbsConfig gc;
  gc.n_draws = c.draws;
  gc.burn_in_fraction = c.burn_in;
  gc.thin = c.thin;
  gc.seed = c.seed;
  gc.identification = d.id;
  auto store = run_gibbs(d.panel, d.spec, d.prior, gc);
  fs::path dir(c.out_dir);
  write_draws_bin(store, (dir / "draws.bin").string());
  write_draws_csv(store, (dir / "draws.csv").string());
  write_standardization(d, c.seed, dir);
  nlohmann::json man = {{"command", "gibbs"},
                        {"config", config_echo(c)},
                        {"model", d.identity},
                        {"config_hash", d.hash},
                        {"seed", c.seed},
                        {"stored_draws", store.draws.size()},
                        {"sign_rejections", store.sign_rejections},
                        {"sampler_seconds", store.wall_seconds},
                        {"wall_seconds", seconds_since(t0)}};
  write_json(man, dir / "manifest.json");
  out << "gibbs: stored " << store.draws.size() << " draws\n";
  return 0;
}

/// Reads variational.json from a fit directory and rebuilds the posterior on the panel.
inline SmfPosterior load_fit(const std::filesystem::path& dir, const PreparedData& d, std::string* hash) {
  auto j = read_json(dir / "variational.json");
  if (hash) *hash = j.value("config_hash", "");
  SmfPosterior post;
  post.spec = d.spec;
  post.q = state_from_json(j.at("state"));
  if (post.q.loadings.n() != d.spec.n || post.q.transition.M_phi.rows() != d.spec.r ||
      post.q.transition.M_phi.cols() != d.spec.s())
    throw StructuralError("variational state does not match the model dimensions");
  post.pass = update_states(d.panel, post.q, d.prior, d.spec);
  return post;
}

inline std::string diff_models(const nlohmann::json& a, const std::string& a_name, const nlohmann::json& b,
                               const std::string& b_name) {
  std::ostringstream os;
  for (const auto& [key, val] : a.items()) {
    if (!b.contains(key)) {
      os << "  " << key << ": " << a_name << "=" << val.dump() << ", " << b_name << "=<absent>\n";
    } else if (b.at(key) != val) {
      os << "  " << key << ": " << a_name << "=" << val.dump() << ", " << b_name << "=" << b.at(key).dump() << '\n';
    }
  }
  for (const auto& [key, val] : b.items())
    if (!a.contains(key)) os << "  " << key << ": " << a_name << "=<absent>, " << b_name << "=" << val.dump() << '\n';
  return os.str();
}

inline void write_forecast_csv(const PredictiveDraws& draws, const std::vector<std::string>& names,
                               const std::optional<StandardizationRecord>& rec, const std::vector<double>& levels,
                               const std::filesystem::path& path) {
  std::ofstream out(path);
  if (!out) throw ParseError("cannot write " + path.string());
  out << "source,h,variable,mean";
  for (double lv : levels) out << ",lo_" << detail::format_double(lv) << ",hi_" << detail::format_double(lv);
  out << '\n';
  std::vector<double> v(draws.D);
  for (int h = 0; h < draws.H; ++h)
    for (int i = 0; i < draws.n; ++i) {
      double sum = 0.0;
      for (int k = 0; k < draws.D; ++k) {
        v[k] = draws.at(k, h, i);
        if (rec) v[k] = rec->to_original(i, v[k]);
        sum += v[k];
      }
      out << draws.source << ',' << h + 1 << ',' << names[i] << ',' << detail::format_double(sum / draws.D);
      for (double lv : levels) {
        auto iv = empirical_interval(v, lv);
        out << ',' << detail::format_double(iv.lo) << ',' << detail::format_double(iv.hi);
      }
      out << '\n';
    }
}

inline int cmd_forecast(const RunConfig& c, std::ostream& out) {
  namespace fs = std::filesystem;
  const auto t0 = std::chrono::steady_clock::now();
  auto d = prepare(c);
  fs::path dir(c.out_dir);
  PredictiveDraws draws;
  std::string source_hash;
  if (!c.fit_dir.empty()) {
    auto post = load_fit(c.fit_dir, d, &source_hash);
    draws = draw_out_of_sample_smf(post, c.horizons, c.smf_draws, c.seed);
  } else {
    source_hash = read_json(fs::path(c.gibbs_dir) / "manifest.json").value("config_hash", "");
    auto store = read_draws_bin((fs::path(c.gibbs_dir) / "draws.bin").string());
    if (!(store.spec == d.spec) || store.T != d.panel.T())
      throw StructuralError("draw store does not match the panel and model");
    draws = draw_out_of_sample_mcmc(store, c.horizons, c.seed);
  }
  if (source_hash != d.hash)
    throw StructuralError("posterior was estimated under a different configuration (hash " + source_hash +
                          ", expected " + d.hash + ")");
  write_forecast_csv(draws, d.panel.names(), d.record, default_levels(), dir / "forecast.csv");
  nlohmann::json man = {{"command", "forecast"},
                        {"config", config_echo(c)},
                        {"model", d.identity},
                        {"config_hash", d.hash},
                        {"seed", c.seed},
                        {"source", draws.source},
                        {"draws", draws.D},
                        {"horizons", draws.H},
                        {"wall_seconds", seconds_since(t0)}};
  write_json(man, dir / "manifest.json");
  out << "forecast: " << draws.H << " horizons from " << draws.D << " " << draws.source << " draws\n";
  return 0;
}

inline int cmd_compare(const RunConfig& c, std::ostream& out, std::ostream& err) {
  namespace fs = std::filesystem;
  const auto t0 = std::chrono::steady_clock::now();
  if (c.identification.empty()) throw DomainError("compare requires identification restrictions");
  auto d = prepare(c);
  auto fit_man = read_json(fs::path(c.fit_dir) / "manifest.json");
  auto gib_man = read_json(fs::path(c.gibbs_dir) / "manifest.json");
  const std::string fh = fit_man.value("config_hash", ""), gh = gib_man.value("config_hash", "");
  if (fh != gh || fh != d.hash) {
    err << "error: artifacts were produced under different configurations\n";
    if (fh != gh)
      err << diff_models(fit_man.value("model", nlohmann::json::object()), "fit",
                         gib_man.value("model", nlohmann::json::object()), "gibbs");
    if (fh != d.hash)
      err << diff_models(fit_man.value("model", nlohmann::json::object()), "fit", d.identity, "current");
    else if (gh != d.hash)
      err << diff_models(gib_man.value("model", nlohmann::json::object()), "gibbs", d.identity, "current");
    return 1;
  }
  auto post = load_fit(c.fit_dir, d, nullptr);
  auto store = read_draws_bin((fs::path(c.gibbs_dir) / "draws.bin").string());
  if (!(store.spec == d.spec) || store.T != d.panel.T())
    throw StructuralError("draw store does not match the panel and model");
  CompareOptions co;
  co.smf_draws = c.smf_draws;
  co.horizons = c.horizons;
  co.seed = c.seed;
  auto rep = compare_posteriors(post, store, co);
  fs::path dir(c.out_dir);
  for (const auto& b : rep.blocks) write_report_csv(b, rep.levels, (dir / ("report_" + b.block + ".csv")).string());
  auto jr = report_to_json(rep);
  jr["config_hash"] = d.hash;
  jr["seed"] = c.seed;
  write_json(jr, dir / "report.json");
  nlohmann::json man = {{"command", "compare"},
                        {"config", config_echo(c)},
                        {"model", d.identity},
                        {"config_hash", d.hash},
                        {"seed", c.seed},
                        {"wall_seconds", seconds_since(t0)}};
  write_json(man, dir / "manifest.json");
  for (const auto& b : rep.blocks) {
    out << b.block << ": MAE " << detail::format_double(b.errors.mae);
    for (std::size_t l = 0; l < rep.levels.size(); ++l)
      out << ", " << detail::format_double(rep.levels[l]) << "% " << detail::format_double(b.coverage[l].mean);
    out << '\n';
  }
  return 0;
}

/// Finds --config in argv so its values can serve as defaults for explicit flags.
inline std::string prescan_config(int argc, const char* const* argv) {
  for (int k = 1; k < argc; ++k) {
    std::string_view a = argv[k];
    if (a == "--config" && k + 1 < argc) return argv[k + 1];
    if (a.starts_with("--config=")) return std::string(a.substr(9));
  }
  return {};
}

}  // namespace cli

/// Entry point of the dfmvi tool. Returns 0 on success, 1 on runtime errors,
/// 2 on usage errors (bad flags, missing input).
inline int run_cli(int argc, const char* const* argv, std::ostream& out = std::cout,
                   std::ostream& err = std::cerr) {
  RunConfig c;
  try {
    auto cfg = cli::prescan_config(argc, argv);
    if (!cfg.empty()) cli::load_config_file(cfg, c);
  } catch (const Error& e) {
    err << "error: " << e.what() << '\n';
    return 2;
  }

  CLI::App app{"Variational and Gibbs estimation of dynamic factor models with missing data", "dfmvi"};
  app.require_subcommand(1);
  std::vector<std::string> id_flags;
  bool no_standardize = false;

  auto common = [&](CLI::App* sub, bool needs_input) {
    sub->add_option("--config", c.config_path, "JSON config file");
    sub->add_option("--out", c.out_dir, "output directory")->required();
    if (needs_input) {
      sub->add_option("--input", c.input, "panel CSV with a header row");
      sub->add_option("--missing-token", c.missing_token, "cell text marking a missing value");
      sub->add_flag("--no-standardize", no_standardize, "estimate on the raw scale");
      sub->add_option("--identify", id_flags, "identification rule name:factor[:sign] (repeatable)");
    }
    sub->add_option("-r,--factors", c.r, "number of factors");
    sub->add_option("-p,--lags", c.p, "lags in the factor transition");
    sub->add_option("--seed", c.seed, "master seed");
  };
  auto prior_flags = [&](CLI::App* sub) {
    sub->add_option("--eta-lambda", c.hyper.eta_lambda, "loading prior precision scale");
    sub->add_option("--eta-phi", c.hyper.eta_phi, "transition prior precision scale");
    sub->add_option("--ell-lambda", c.hyper.ell_lambda, "loading lag decay");
    sub->add_option("--ell-phi", c.hyper.ell_phi, "transition lag decay");
    sub->add_option("--nu", c.hyper.nu, "variance prior degrees of freedom");
    sub->add_option("--tau2", c.hyper.tau2, "variance prior scale");
    sub->add_option("--sigma-f0", c.hyper.sigma_f0, "initial state prior variance");
  };

  auto* sim = app.add_subcommand("simulate", "simulate a panel from a random DFM");
  common(sim, false);
  sim->add_option("-n,--variables", c.n, "number of variables");
  sim->add_option("-T,--periods", c.T, "number of periods");
  sim->add_option("--missing-rate", c.missing_rate, "share of cells missing at random");
  sim->add_option("--ragged-max", c.ragged_max, "largest trailing gap of the ragged edge");
  sim->add_option("--stride", c.stride, "per variable: observed every k-th period");
  sim->add_option("--missing-token", c.missing_token, "cell text marking a missing value");

  auto* fit = app.add_subcommand("fit", "structured mean-field variational fit");
  common(fit, true);
  prior_flags(fit);
  fit->add_option("--tolerance", c.tolerance, "relative ELBO convergence tolerance");
  fit->add_option("--max-iters", c.max_iters, "iteration cap");
  fit->add_option("--eta-grid", c.eta_lambda_grid, "loading prior scales to try; the best ELBO wins")
      ->delimiter(',');

  auto* gib = app.add_subcommand("gibbs", "Gibbs sampler benchmark");
  common(gib, true);
  prior_flags(gib);
  gib->add_option("--draws", c.draws, "total draws including burn-in");
  gib->add_option("--burn-in", c.burn_in, "burn-in fraction");
  gib->add_option("--thin", c.thin, "keep every k-th draw");

  auto* fc = app.add_subcommand("forecast", "h-step predictive draws from a fit or a draw store");
  common(fc, true);
  prior_flags(fc);
  auto* fc_fit = fc->add_option("--fit", c.fit_dir, "output directory of a fit run");
  auto* fc_gib = fc->add_option("--gibbs", c.gibbs_dir, "output directory of a gibbs run");
  fc_fit->excludes(fc_gib);
  fc->add_option("--horizons", c.horizons, "number of steps ahead");
  fc->add_option("--smf-draws", c.smf_draws, "draws from the variational posterior");

  auto* cmp = app.add_subcommand("compare", "compare a fit with a Gibbs draw store");
  common(cmp, true);
  prior_flags(cmp);
  cmp->add_option("--fit", c.fit_dir, "output directory of a fit run")->required();
  cmp->add_option("--gibbs", c.gibbs_dir, "output directory of a gibbs run")->required();
  cmp->add_option("--horizons", c.horizons, "out-of-sample horizons");
  cmp->add_option("--smf-draws", c.smf_draws, "draws from the variational posterior");

  auto usage = [&](const std::string& msg) {
    err << "error: " << msg << "\n\n";
    const CLI::App* sub = app.get_subcommands().empty() ? &app : app.get_subcommands().front();
    err << sub->help();
    return 2;
  };

  try {
    app.parse(argc, argv);
  } catch (const CLI::CallForHelp& e) {
    return app.exit(e, out, err);
  } catch (const CLI::CallForAllHelp& e) {
    return app.exit(e, out, err);
  } catch (const CLI::ParseError& e) {
    return usage(e.what());
  }

  c.command = app.get_subcommands().front()->get_name();
  if (no_standardize) c.standardize = false;
  try {
    if (!id_flags.empty()) {
      c.identification.clear();
      for (const auto& f : id_flags) c.identification.push_back(cli::parse_rule(f));
    }
  } catch (const Error& e) {
    return usage(e.what());
  }
  if (c.command != "simulate") {
    if (c.input.empty()) return usage("--input is required");
    if (!std::filesystem::is_regular_file(c.input)) return usage("input panel not found: " + c.input);
  }
  if (c.command == "forecast" && c.fit_dir.empty() && c.gibbs_dir.empty())
    return usage("forecast needs --fit or --gibbs");

  try {
    std::filesystem::create_directories(c.out_dir);
    if (c.command == "simulate") return cli::cmd_simulate(c, out);
    if (c.command == "fit") return cli::cmd_fit(c, out);
    if (c.command == "gibbs") return cli::cmd_gibbs(c, out);
    if (c.command == "forecast") return cli::cmd_forecast(c, out);
    return cli::cmd_compare(c, out, err);
  } catch (const std::exception& e) {
    err << "error: " << e.what() << '\n';
    return 1;
  }
}

}  // namespace dfmvi
