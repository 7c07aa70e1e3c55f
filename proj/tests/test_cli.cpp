#include "catch_amalgamated.hpp"
#include "test_support.hpp"
#include "dfmvi/cli.hpp"

#include <fstream>
#include <sstream>

using namespace dfmvi;
namespace fs = std::filesystem;

namespace {

struct Run {
  int code;
  std::string out, err;
};

Run run(std::vector<std::string> args) {
  args.insert(args.begin(), "dfmvi");
  std::vector<const char*> argv;
  for (const auto& a : args) argv.push_back(a.c_str());
  std::ostringstream out, err;
  const int code = run_cli(static_cast<int>(argv.size()), argv.data(), out, err);
  return {code, out.str(), err.str()};
}

std::string slurp(const fs::path& p) {
  std::ifstream in(p, std::ios::binary);
  std::ostringstream s;
  s << in.rdbuf();
  return s.str();
}

std::vector<std::string> lines(const fs::path& p) {
  std::ifstream in(p);
  std::vector<std::string> out;
  for (std::string l; std::getline(in, l);) out.push_back(l);
  return out;
}

// Shared small workflow: one simulated panel, one fit, one short Gibbs run.
struct Workflow {
  fs::path root = testing::scratch_dir("cli_workflow");
  std::string panel = (root / "sim" / "panel.csv").string();
  std::vector<std::string> model = {"-r", "1", "-p", "0", "--identify", "y1:0", "--seed", "11"};

  Workflow() {
    REQUIRE(run({"simulate", "--out", (root / "sim").string(), "-n", "6", "-T", "40", "-r", "1", "-p", "0",
                 "--missing-rate", "0.1", "--ragged-max", "2", "--seed", "3"})
                .code == 0);
    REQUIRE(fit("fit").code == 0);
    REQUIRE(gibbs("gibbs", {}).code == 0);
  }

  Run fit(const std::string& dir) {
    std::vector<std::string> a = {"fit", "--input", panel, "--out", (root / dir).string()};
    a.insert(a.end(), model.begin(), model.end());
    return run(a);
  }

  Run gibbs(const std::string& dir, std::vector<std::string> extra) {
    std::vector<std::string> a = {"gibbs", "--input", panel, "--out", (root / dir).string(), "--draws", "3000"};
    a.insert(a.end(), model.begin(), model.end());
    a.insert(a.end(), extra.begin(), extra.end());
    return run(a);
  }

  Run compare(const std::string& dir, const std::string& gib) {
    std::vector<std::string> a = {"compare", "--input", panel,     "--out",         (root / dir).string(),
                                  "--fit",   (root / "fit").string(), "--gibbs", (root / gib).string(),
                                  "--smf-draws", "2000", "--horizons", "2"};
    a.insert(a.end(), model.begin(), model.end());
    return run(a);
  }
};

Workflow& workflow() {
  static Workflow w;
  return w;
}

}  // namespace

TEST_CASE("missing input exits with usage") {
  auto r = run({"fit", "--out", testing::scratch_dir("cli_noinput").string()});
  CHECK(r.code == 2);
  CHECK(r.err.find("--input") != std::string::npos);
  CHECK(r.err.find("Usage") != std::string::npos);

  auto r2 = run({"fit", "--out", testing::scratch_dir("cli_noinput").string(), "--input", "/nonexistent/x.csv"});
  CHECK(r2.code == 2);

  auto r3 = run({"fit", "--bogus"});
  CHECK(r3.code == 2);
}

TEST_CASE("the installed tool reports usage errors") {
  const std::string cmd = std::string(DFMVI_TOOL) + " fit --out " + testing::scratch_dir("cli_tool").string() +
                          " > /dev/null 2>&1";
  const int status = std::system(cmd.c_str());
  REQUIRE(WIFEXITED(status));
  CHECK(WEXITSTATUS(status) == 2);
}

TEST_CASE("unknown config keys are rejected") {
  auto dir = testing::scratch_dir("cli_badcfg");
  std::ofstream(dir / "cfg.json") << R"({"factors": 1, "colour": "blue"})";
  auto r = run({"simulate", "--out", dir.string(), "--config", (dir / "cfg.json").string()});
  CHECK(r.code == 2);
  CHECK(r.err.find("colour") != std::string::npos);
}

TEST_CASE("fit writes a monotone ELBO trace") {
  auto& w = workflow();
  auto rows = lines(w.root / "fit" / "elbo_trace.csv");
  REQUIRE(rows.size() > 2);
  CHECK(rows[0] == "iteration,elbo");
  double prev = -1e300;
  for (std::size_t k = 1; k < rows.size(); ++k) {
    const double e = std::stod(rows[k].substr(rows[k].find(',') + 1));
    CHECK(e >= prev - 1e-9 * std::abs(prev));
    prev = e;
  }
  CHECK(lines(w.root / "fit" / "states.csv").size() == 42);
}

TEST_CASE("fit reruns are byte identical") {
  auto& w = workflow();
  REQUIRE(w.fit("fit_again").code == 0);
  for (const char* f : {"variational.json", "elbo_trace.csv", "states.csv", "standardization.json"})
    CHECK(slurp(w.root / "fit" / f) == slurp(w.root / "fit_again" / f));
}

TEST_CASE("artifacts carry the configuration hash and seed") {
  auto& w = workflow();
  const auto man = cli::read_json(w.root / "fit" / "manifest.json");
  const std::string hash = man.at("config_hash");
  CHECK(hash.size() == 16);
  for (const char* d : {"fit", "gibbs"}) {
    for (const char* f : {"manifest.json", "standardization.json"}) {
      auto j = cli::read_json(w.root / d / f);
      CHECK(j.at("config_hash") == hash);
      CHECK(j.at("seed") == 11);
    }
  }
  auto v = cli::read_json(w.root / "fit" / "variational.json");
  CHECK(v.at("config_hash") == hash);
  CHECK(v.at("seed") == 11);
  auto store = read_draws_bin((w.root / "gibbs" / "draws.bin").string());
  CHECK(store.draws.size() == 2700);
}

TEST_CASE("compare reports every block") {
  auto& w = workflow();
  auto r = w.compare("cmp", "gibbs");
  INFO(r.err);
  REQUIRE(r.code == 0);
  for (const char* b : {"loadings", "sigma2", "transition", "factors", "insample", "h1", "h2"}) {
    INFO(b);
    CHECK(fs::exists(w.root / "cmp" / (std::string("report_") + b + ".csv")));
    CHECK(r.out.find(std::string(b) + ": MAE") != std::string::npos);
  }
  CHECK(lines(w.root / "cmp" / "report_sigma2.csv").size() == 7);
  auto rep = cli::read_json(w.root / "cmp" / "report.json");
  CHECK(rep.at("config_hash") == cli::read_json(w.root / "fit" / "manifest.json").at("config_hash"));
}

TEST_CASE("compare refuses artifacts from different configurations") {
  auto& w = workflow();
  REQUIRE(w.gibbs("gibbs_nu", {"--nu", "5"}).code == 0);
  auto r = w.compare("cmp_bad", "gibbs_nu");
  CHECK(r.code == 1);
  CHECK(r.err.find("different configurations") != std::string::npos);
  CHECK(r.err.find("nu") != std::string::npos);
  CHECK_FALSE(fs::exists(w.root / "cmp_bad" / "report.json"));
}

TEST_CASE("forecast from either source") {
  auto& w = workflow();
  for (auto [src, label] : {std::pair{"fit", "SMF,"}, std::pair{"gibbs", "MCMC,"}}) {
    INFO(src);
    std::vector<std::string> a = {"forecast", "--input", w.panel, "--out", (w.root / (std::string("fc_") + src)).string(),
                                  std::string("--") + src, (w.root / src).string(), "--horizons", "3",
                                  "--smf-draws", "1000"};
    a.insert(a.end(), w.model.begin(), w.model.end());
    auto r = run(a);
    INFO(r.err);
    REQUIRE(r.code == 0);
    auto rows = lines(w.root / (std::string("fc_") + src) / "forecast.csv");
    CHECK(rows.size() == 1 + 3 * 6);
    CHECK(rows[1].starts_with(label));
  }
  auto r = run({"forecast", "--input", w.panel, "--out", (w.root / "fc_none").string()});
  CHECK(r.code == 2);
}
