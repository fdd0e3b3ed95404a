// Command line front end for the level iteration.
//
// Exit codes: 0 all asserted checks pass, 1 a check failed, 2 bad configuration.

#include <filesystem>
#include <fstream>
#include <iostream>
#include <random>

#include "CLI11.hpp"
#include "nsbmo/driver.hpp"

using namespace nsbmo;
namespace fs = std::filesystem;

namespace {

struct Globals {
  std::string config;
  std::optional<int> grid;
  bool toy = false;
  std::optional<std::string> out;
  std::optional<std::uint64_t> seed;
};

RunConfig load_config(const Globals& g) {
  RunConfig c = g.config.empty() ? RunConfig{} : RunConfig::from_ini(g.config);
  if (g.grid) c.grid = *g.grid;
  if (g.toy) c.toy = true;
  if (g.out) c.out = *g.out;
  if (g.seed) c.seed = *g.seed;
  c.validate();
  parameter_schedule(c);  // surface schedule errors before any work
  return c;
}

void print_checks(const std::string& section, const json& arr) {
  for (auto& c : arr) {
    const std::string st = c.at("status");
    if (st == "report-only") continue;
    std::cout << (st == "pass" ? "PASS " : "FAIL ") << section << "." << c.at("name").get<std::string>();
    if (c.contains("value") && !c.at("value").is_null()) std::cout << " value=" << c.at("value").get<double>();
    if (!c.at("target").is_null()) std::cout << " target=" << c.at("target").get<double>();
    if (st == "fail" && c.contains("note")) std::cout << " (" << c.at("note").get<std::string>() << ")";
    std::cout << "\n";
  }
}

int finish(const BranchState& B) {
  json L = B.ledger();
  fs::path out(B.config.out);
  atomic_write(out / "ledger.json", L.dump(2) + "\n");
  atomic_write(out / "config.ini", B.config.to_ini());
  print_checks("cutoffs", L.at("cutoffs"));
  for (auto& l : L.at("levels")) print_checks("level" + std::to_string(l.at("m").get<int>()), l.at("checks"));
  print_checks("pair", L.at("pair"));
  if (L.at("separation").contains("checks")) print_checks("separation", L.at("separation").at("checks"));
  auto& s = L.at("summary");
  std::cout << "summary: " << s.at("pass") << " pass, " << s.at("fail") << " fail, " << s.at("report_only")
            << " report-only; ledger " << (out / "ledger.json").string() << "\n";
  return ledger_exit_code(L);
}

// Levels 1..m-1 built without checks, then level m with the given options.
BranchState levels_up_to(const RunConfig& cfg, int m, const RunOptions& top) {
  RunConfig c = cfg;
  if (m < 1) throw ConfigError("--m must be at least 1");
  c.levels = std::max(c.levels, m);
  BranchState B = init_branch(c);
  B.levels.resize(m);
  const RunOptions off{false, false, false, false};
  for (int l = 1; l <= m; ++l) {
    LevelState& L = run_level(l, B, l == m ? top : off);
    if (!L.built()) break;
  }
  return B;
}

int verify_geometry(const RunConfig& cfg) {
  DirectionSet L;
  std::mt19937_64 rng(cfg.seed);
  std::normal_distribution<double> N(0.0, 1.0);
  std::uniform_real_distribution<double> U(0.0, 1.0);
  double worst = 0.0;
  for (int i = 0; i < 1000; ++i) {
    double d11 = N(rng), d12 = N(rng), d22 = N(rng);
    double f = std::sqrt(d11 * d11 + 2 * d12 * d12 + d22 * d22);
    double r = kDecompositionRadius * U(rng) / f;
    SymMatrix2 R{1.0 + r * d11, r * d12, 1.0 + r * d22};
    auto a = decompose(L, R);
    SymMatrix2 back = L.recombine({a[0] * a[0], a[1] * a[1], a[2] * a[2]});
    worst = std::max(worst, back.frobenius_distance(R));
  }
  auto w = L.weights(SymMatrix2::identity());
  const double ref[3] = {7.0 / 16, 25.0 / 32, 25.0 / 32};
  double wdev = 0.0;
  for (int p = 0; p < 3; ++p) wdev = std::max(wdev, std::abs(w[p] - ref[p]));
  bool rejected = false;
  try {
    decompose(L, SymMatrix2{1.0, 0.0, 0.0}, true);
  } catch (const GeometryError&) {
    rejected = true;
  }
  std::vector<Check> checks{
      check_le("reconstruction", "sum of weights times kbar kbar returns R", worst, 1e-12),
      check_le("identity_weights", "weights of the identity", wdev, 1e-14),
      rejected ? Check{"diag10_rejected", "negative weight is rejected", 1.0, 1.0, "pass", ""}
               : check_failed("diag10_rejected", "negative weight is rejected", "diag(1, 0) was accepted")};
  json j = {{"schema", kLedgerSchema}, {"seed", cfg.seed}, {"checks", checks_json(checks)}};
  atomic_write(fs::path(cfg.out) / "geometry.json", j.dump(2) + "\n");
  print_checks("geometry", j.at("checks"));
  for (auto& c : checks)
    if (c.status == "fail") return 1;
  return 0;
}

int export_ledger(const RunConfig& cfg, const std::string& format) {
  fs::path out(cfg.out), dst = out / "export";
  if (format == "nsf2") {
    int n = 0;
    std::vector<fs::path> dirs;
    if (fs::is_directory(out))
      for (auto& e : fs::directory_iterator(out))
        if (e.is_directory() && e.path().filename().string().rfind("level_", 0) == 0) dirs.push_back(e.path());
    std::sort(dirs.begin(), dirs.end());
    for (auto& d : dirs)
      for (const char* f : {"wp0.nsf2", "ws0.nsf2"}) {
        fs::path src = d / f;
        if (!fs::exists(src)) continue;
        write_nsf2(dst / (d.filename().string() + "_" + f), read_nsf2(src));
        ++n;
      }
    if (n == 0) throw FieldIOError("no level fields under " + out.string() + "; run build-level first");
    std::cout << "exported " << n << " NSF2 fields to " << dst.string() << "\n";
    return 0;
  }
  std::ifstream in(out / "ledger.json");
  if (!in) throw FieldIOError("no ledger at " + (out / "ledger.json").string());
  json L = json::parse(in);
  if (L.value("schema", "") != kLedgerSchema) throw FieldIOError("ledger schema is not " + std::string(kLedgerSchema));
  if (format == "csv")
    atomic_write(dst / "ledger.csv", ledger_csv(L));
  else
    atomic_write(dst / "ledger.json", L.dump(2) + "\n");
  std::cout << "exported ledger as " << format << " to " << dst.string() << "\n";
  return 0;
}

}  // namespace

int main(int argc, char** argv) {
  CLI::App app{"Constructive non-uniqueness experiments for 2D Navier-Stokes on the torus"};
  app.require_subcommand(1);
  app.fallthrough();
  Globals g;
  app.add_option("--config", g.config, "run configuration (INI)")->check(CLI::ExistingFile);
  app.add_option("--grid", g.grid, "grid size n");
  app.add_flag("--toy", g.toy, "allow the toy parameter schedule");
  app.add_option("--out", g.out, "output directory");
  app.add_option("--seed", g.seed, "random seed");

  int m = 1, levels = 0;
  std::string format = "json";
  auto* geo = app.add_subcommand("verify-geometry", "check the direction-set decomposition");
  auto* build = app.add_subcommand("build-level", "build levels 1..m and save level m");
  build->add_option("--m", m, "level")->required();
  auto* ident = app.add_subcommand("check-identities", "identity and contract checks at level m");
  ident->add_option("--m", m, "level")->required();
  auto* fns = app.add_subcommand("solve-fns", "forced corrector at level m");
  fns->add_option("--m", m, "level")->required();
  auto* pair = app.add_subcommand("build-pair", "build both branches through M levels");
  pair->add_option("--levels", levels, "M_max")->required();
  auto* sep = app.add_subcommand("separation", "separation measurement at lambda_1^-2");
  auto* run = app.add_subcommand("run", "full pipeline: cutoffs, levels, pair, separation");
  auto* exp = app.add_subcommand("export", "export the ledger or level fields");
  exp->add_option("--format", format, "csv, json or nsf2")->check(CLI::IsMember({"csv", "json", "nsf2"}));

  try {
    app.parse(argc, argv);
  } catch (const CLI::ParseError& e) {
    int rc = app.exit(e);
    return rc == 0 ? 0 : 2;
  }

  RunConfig cfg;
  try {
    cfg = load_config(g);
  } catch (const std::exception& e) {
    std::cerr << "configuration error: " << e.what() << "\n";
    return 2;
  }

  try {
    if (*geo) return verify_geometry(cfg);
    if (*build) {
      BranchState B = levels_up_to(cfg, m, {false, false, false, false});
      const LevelState& L = B.levels[m - 1];
      if (L.built()) {
        save_level_state(B, L, cfg.out);
        std::cout << "built level " << m << " (lambda = " << L.lambda << ", C0 = " << L.C0 << ") into "
                  << level_dir(cfg.out, m).string() << "\n";
      }
      return finish(B);
    }
    if (*ident) return finish(levels_up_to(cfg, m, {true, true, false, false}));
    if (*fns) return finish(levels_up_to(cfg, m, {false, false, true, false}));
    if (*pair || *sep) {
      RunConfig c = cfg;
      if (*pair) {
        if (levels < 1) throw ConfigError("--levels must be at least 1");
        c.levels = levels;
        parameter_schedule(c);
      }
      BranchState B = levels_up_to(c, c.levels, {false, false, true, false});
      for (int l = 1; l < c.levels; ++l) {
        // lower levels also need their correctors
        if (!B.levels[l - 1].corrector_available() && B.levels[l - 1].built()) {
          BranchState F = levels_up_to(c, l, {false, false, true, false});
          B.levels[l - 1].checks = F.levels[l - 1].checks;
          B.levels[l - 1].fns = F.levels[l - 1].fns;
          B.levels[l - 1].fns_record = F.levels[l - 1].fns_record;
        }
      }
      bool ok = true;
      for (auto& l : B.levels) ok = ok && l.built();
      if (ok) {
        build_solution_pair(B);
        if (*sep) separation_report(B);
      }
      return finish(B);
    }
    if (*run) {
      BranchState B = run_pipeline(cfg);
      for (auto& L : B.levels) save_level_state(B, L, cfg.out);
      return finish(B);
    }
    if (*exp) return export_ledger(cfg, format);
  } catch (const ConfigError& e) {
    std::cerr << "configuration error: " << e.what() << "\n";
    return 2;
  } catch (const ScheduleError& e) {
    std::cerr << "configuration error: " << e.what() << "\n";
    return 2;
  } catch (const std::exception& e) {
    std::cerr << "error: " << e.what() << "\n";
    return 1;
  }
  return 0;
}
