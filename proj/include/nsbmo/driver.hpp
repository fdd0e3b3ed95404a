#pragma once
// Orchestration: run configuration, the level iteration, the two branch
// sums, the separation measurement, the JSON ledger and level persistence.

#include <boost/property_tree/ini_parser.hpp>
#include <boost/property_tree/ptree.hpp>

#include <algorithm>
#include <chrono>
#include <cmath>
#include <filesystem>
#include <fstream>
#include <map>
#include <memory>
#include <optional>
#include <sstream>
#include <string>
#include <vector>

#include "json.hpp"
#include "nsbmo/construction.hpp"
#include "nsbmo/field_io.hpp"
#include "nsbmo/function_spaces.hpp"
#include "nsbmo/geometry.hpp"
#include "nsbmo/ns_solver.hpp"
#include "nsbmo/spectral.hpp"

namespace nsbmo {

using nlohmann::json;

class ConfigError : public std::runtime_error {
 public:
  using std::runtime_error::runtime_error;
};

inline constexpr const char* kLedgerSchema = "nsbmo-ledger/1";

// ---------------------------------------------------------------------------
// Configuration

struct RunConfig {
  // schedule; a = b = 0 means the explicit lambda / mu lists are used
  int n_lambda = DirectionSet::kDenominatorLcm;
  std::int64_t a = 0, b = 0;
  double ell_exp = 2.0;
  bool toy = true;
  std::vector<std::int64_t> lambdas{25, 125, 625};
  std::vector<std::int64_t> mus{5, 5, 5};
  double c0_floor = 1000.0;
  int levels = 2;  // M_max
  double seed_amplitude = 1.0;

  int grid = 2048;

  int profile_resolution = 16384;
  double profile_half_width = 0.01;
  int lift_modes = 48;

  // corrector solver; dt <= 0 picks 0.25 lambda_max^-2 before the CFL cap
  double solver_dt = 0.0;
  double cfl_safety = 0.5;
  long max_steps = 200000;
  double horizon = 3.0;  // T_end in units of lambda_1^-2

  int check_times = 5;   // F^(1) contract samples
  int norm_samples = 3;  // time samples per norm report
  bool norms = true;

  std::string out = "nsbmo_out";
  std::uint64_t seed = 20240601;

  void validate() const {
    auto bad = [](const std::string& m) { throw ConfigError("config: " + m); };
    if (grid < 16 || (grid & (grid - 1)) != 0) bad("grid must be a power of two >= 16");
    if (levels < 1) bad("levels must be at least 1");
    if (profile_resolution < 64) bad("profile resolution must be at least 64");
    if (!(profile_half_width > 0.0 && profile_half_width < 0.5)) bad("profile half width must lie in (0, 0.5)");
    if (lift_modes < 1) bad("lift_modes must be positive");
    if (!(cfl_safety > 0.0 && cfl_safety <= 1.0)) bad("cfl_safety must lie in (0, 1]");
    if (max_steps < 1) bad("max_steps must be positive");
    if (!(horizon > 0.0)) bad("horizon must be positive");
    if (check_times < 1) bad("check_times must be positive");
    if (norm_samples < 2) bad("norm_samples must be at least 2");
    if (!(c0_floor > 0.0)) bad("c0_floor must be positive");
    if (out.empty()) bad("out must not be empty");
  }

  static std::vector<std::int64_t> parse_list(const std::string& s, const char* key) {
    std::vector<std::int64_t> v;
    std::string item;
    std::stringstream ss(s);
    while (std::getline(ss, item, ',')) {
      auto b = item.find_first_not_of(" \t"), e = item.find_last_not_of(" \t");
      if (b == std::string::npos) continue;
      try {
        std::size_t used = 0;
        std::string t = item.substr(b, e - b + 1);
        v.push_back(std::stoll(t, &used));
        if (used != t.size()) throw std::invalid_argument(t);
      } catch (const std::exception&) {
        throw ConfigError(std::string("config: ") + key + " has a non-integer entry '" + item + "'");
      }
    }
    return v;
  }

  static std::string join(const std::vector<std::int64_t>& v) {
    std::string s;
    for (std::size_t i = 0; i < v.size(); ++i) s += (i ? ", " : "") + std::to_string(v[i]);
    return s;
  }

  static RunConfig from_ptree(const boost::property_tree::ptree& pt) {
    RunConfig c;
    static const std::map<std::string, std::vector<std::string>> known = {
        {"schedule", {"n_lambda", "a", "b", "ell_exp", "toy", "lambdas", "mus", "c0_floor", "levels", "seed_amplitude"}},
        {"grid", {"n"}},
        {"profile", {"resolution", "half_width", "lift_modes"}},
        {"solver", {"dt", "cfl_safety", "max_steps", "horizon"}},
        {"run", {"out", "seed", "check_times", "norm_samples", "norms"}}};
    for (auto& [sec, body] : pt) {
      auto it = known.find(sec);
      if (it == known.end()) throw ConfigError("config: unknown section [" + sec + "]");
      for (auto& [key, v] : body) {
        (void)v;
        if (std::find(it->second.begin(), it->second.end(), key) == it->second.end())
          throw ConfigError("config: unknown key " + sec + "." + key);
      }
    }
    auto get = [&pt](const char* key, auto& out) {
      using T = std::decay_t<decltype(out)>;
      auto raw = pt.get_optional<std::string>(key);
      if (!raw) return;
      auto v = pt.get_optional<T>(key);
      if (!v) throw ConfigError(std::string("config: ") + key + " has an invalid value '" + *raw + "'");
      out = *v;
    };
    get("schedule.n_lambda", c.n_lambda);
    get("schedule.a", c.a);
    get("schedule.b", c.b);
    get("schedule.ell_exp", c.ell_exp);
    get("schedule.toy", c.toy);
    if (auto s = pt.get_optional<std::string>("schedule.lambdas")) c.lambdas = parse_list(*s, "lambdas");
    if (auto s = pt.get_optional<std::string>("schedule.mus")) c.mus = parse_list(*s, "mus");
    get("schedule.c0_floor", c.c0_floor);
    get("schedule.levels", c.levels);
    get("schedule.seed_amplitude", c.seed_amplitude);
    get("grid.n", c.grid);
    get("profile.resolution", c.profile_resolution);
    get("profile.half_width", c.profile_half_width);
    get("profile.lift_modes", c.lift_modes);
    get("solver.dt", c.solver_dt);
    get("solver.cfl_safety", c.cfl_safety);
    get("solver.max_steps", c.max_steps);
    get("solver.horizon", c.horizon);
    get("run.out", c.out);
    get("run.seed", c.seed);
    get("run.check_times", c.check_times);
    get("run.norm_samples", c.norm_samples);
    get("run.norms", c.norms);
    c.validate();
    return c;
  }

  static RunConfig from_ini(const std::filesystem::path& path) {
    boost::property_tree::ptree pt;
    try {
      boost::property_tree::read_ini(path.string(), pt);
    } catch (const boost::property_tree::ini_parser_error& e) {
      throw ConfigError(std::string("config: ") + e.what());
    }
    return from_ptree(pt);
  }

  static RunConfig from_ini_string(const std::string& text) {
    boost::property_tree::ptree pt;
    std::istringstream in(text);
    try {
      boost::property_tree::read_ini(in, pt);
    } catch (const boost::property_tree::ini_parser_error& e) {
      throw ConfigError(std::string("config: ") + e.what());
    }
    return from_ptree(pt);
  }

  std::string to_ini() const {
    std::ostringstream o;
    o.precision(17);
    o << "[schedule]\n"
      << "n_lambda = " << n_lambda << "\na = " << a << "\nb = " << b << "\nell_exp = " << ell_exp
      << "\ntoy = " << (toy ? "true" : "false") << "\nlambdas = " << join(lambdas) << "\nmus = " << join(mus)
      << "\nc0_floor = " << c0_floor << "\nlevels = " << levels << "\nseed_amplitude = " << seed_amplitude << "\n\n"
      << "[grid]\nn = " << grid << "\n\n"
      << "[profile]\nresolution = " << profile_resolution << "\nhalf_width = " << profile_half_width
      << "\nlift_modes = " << lift_modes << "\n\n"
      << "[solver]\ndt = " << solver_dt << "\ncfl_safety = " << cfl_safety << "\nmax_steps = " << max_steps
      << "\nhorizon = " << horizon << "\n\n"
      << "[run]\nout = " << out << "\nseed = " << seed << "\ncheck_times = " << check_times
      << "\nnorm_samples = " << norm_samples << "\nnorms = " << (norms ? "true" : "false") << "\n";
    return o.str();
  }

  // The output directory is left out so that runs written to different
  // places still produce identical ledgers.
  json to_json() const {
    return {{"n_lambda", n_lambda},
            {"a", a},
            {"b", b},
            {"ell_exp", ell_exp},
            {"toy", toy},
            {"lambdas", lambdas},
            {"mus", mus},
            {"c0_floor", c0_floor},
            {"levels", levels},
            {"seed_amplitude", seed_amplitude},
            {"grid", grid},
            {"profile_resolution", profile_resolution},
            {"profile_half_width", profile_half_width},
            {"lift_modes", lift_modes},
            {"solver_dt", solver_dt},
            {"cfl_safety", cfl_safety},
            {"max_steps", max_steps},
            {"horizon", horizon},
            {"check_times", check_times},
            {"norm_samples", norm_samples},
            {"norms", norms},
            {"seed", seed}};
  }
};

// Explicit lists or the toy formula; the lists may extend past M_max since
// the cutoff for level 2q-1 reads mu up to that level.
inline ParamSchedule parameter_schedule(const RunConfig& c) {
  ParamSchedule S;
  if (c.a != 0 || c.b != 0) {
    S = ParamSchedule::from_formula(c.n_lambda, c.a, c.b, c.levels, c.toy, c.ell_exp);
  } else {
    S.n_lambda = c.n_lambda;
    S.ell_exp = c.ell_exp;
    S.toy = c.toy;
    S.lambdas = c.lambdas;
    S.mus = c.mus;
    S.validate();
    if (S.levels() < c.levels)
      throw ScheduleError("schedule lists " + std::to_string(S.levels()) + " levels but levels = " +
                          std::to_string(c.levels));
  }
  S.c0_floor = c.c0_floor;
  return S;
}

// ---------------------------------------------------------------------------
// Ledger entries

struct Check {
  std::string name, ref;
  std::optional<double> value, target;
  std::string status;  // pass | fail | report-only
  std::string note;
  json to_json() const {
    json j = {{"name", name}, {"ref", ref}, {"status", status}};
    j["value"] = value ? json(*value) : json(nullptr);
    j["target"] = target ? json(*target) : json(nullptr);
    if (!note.empty()) j["note"] = note;
    return j;
  }
};

inline Check check_le(std::string name, std::string ref, double value, double target, std::string note = {}) {
  bool ok = std::isfinite(value) && value <= target;
  return {std::move(name), std::move(ref), value, target, ok ? "pass" : "fail", std::move(note)};
}
inline Check check_ge(std::string name, std::string ref, double value, double target, std::string note = {}) {
  bool ok = std::isfinite(value) && value >= target;
  return {std::move(name), std::move(ref), value, target, ok ? "pass" : "fail", std::move(note)};
}
inline Check check_failed(std::string name, std::string ref, std::string note, std::optional<double> value = {},
                          std::optional<double> target = {}) {
  return {std::move(name), std::move(ref), value, target, "fail", std::move(note)};
}
inline Check check_info(std::string name, std::string ref, std::optional<double> value, std::string note = {}) {
  return {std::move(name), std::move(ref), value, std::nullopt, "report-only", std::move(note)};
}

// Inductive bound as a measured / target ratio; never asserted.
struct NormEntry {
  std::string name, ref, shape;
  std::optional<double> measured;
  double target = 0.0;
  std::string note;
  json to_json() const {
    json j = {{"name", name}, {"ref", ref}, {"shape", shape}, {"target", target}, {"status", "report-only"}};
    j["measured"] = measured ? json(*measured) : json(nullptr);
    j["ratio"] = measured && target > 0 ? json(*measured / target) : json(nullptr);
    if (!note.empty()) j["note"] = note;
    return j;
  }
};

inline json checks_json(const std::vector<Check>& v) {
  json a = json::array();
  for (auto& c : v) a.push_back(c.to_json());
  return a;
}

// ---------------------------------------------------------------------------
// Time integration of decaying samples

namespace detail {

// int_0^inf v(t) dt for v sampled at t_i = i h with v = e^{-kappa t} g,
// g piecewise linear between nodes and constant after the last one.
inline double decay_integral(const std::vector<double>& v, double h, double kappa) {
  if (v.empty()) return 0.0;
  double s = 0.0;
  const double q = std::exp(-kappa * h);
  for (std::size_t i = 0; i + 1 < v.size(); ++i) {
    const double a = i * h, E = std::exp(-kappa * a);
    const double ga = v[i] / E, gb = v[i + 1] / (E * q);
    const double I0 = E * (1.0 - q) / kappa;
    const double I1 = E * (1.0 - q * (1.0 + kappa * h)) / (kappa * kappa);
    s += ga * I0 + (gb - ga) / h * I1;
  }
  s += v.back() / kappa;  // g frozen: int_{t_last}^inf g e^{-kappa t} = v_last / kappa
  return s;
}

inline double cumulative(const std::vector<double>& orders, int N) {
  double s = 0.0;
  for (int j = 0; j <= N; ++j) s += orders.at(j);
  return s;
}

inline Components sym_components(const MatrixField& A) { return {A.c[0], A.c[1], A.c[3]}; }

inline Components grad_components(const VectorField& v) {
  return {partial(v[0], 0), partial(v[0], 1), partial(v[1], 0), partial(v[1], 1)};
}

}  // namespace detail

// ---------------------------------------------------------------------------
// Level and branch state

struct LevelState {
  int m = 0;
  double lambda = 0.0;
  double C0 = 0.0;
  std::shared_ptr<const Level> level;
  std::shared_ptr<const PerturbationLevel> pert;  // null for the seed
  std::optional<FnsResult> fns;
  std::optional<FnsPreflight> preflight;
  std::vector<Check> checks;
  std::vector<NormEntry> norms;
  json fns_record;

  bool built() const { return bool(level); }
  // w^(ns) exists: trivially for the seed, or when the corrector was solved.
  bool corrector_available() const { return level && (level->is_seed() || fns.has_value()); }
  bool failed() const {
    for (auto& c : checks)
      if (c.status == "fail") return true;
    return false;
  }

  VectorField wp(double t) const { return level->wp(t); }
  VectorField ws(double t) const { return pert ? pert->ws(t) : VectorField(level->grid()); }
  // Saved corrector sample at t (linear between samples); zero before it starts.
  std::optional<VectorField> wns(double t) const {
    if (level->is_seed()) return VectorField(level->grid());
    if (!fns) return std::nullopt;
    const auto& tr = fns->trajectory;
    if (t <= tr.times.front()) return tr.states.front();
    if (t > tr.times.back()) return std::nullopt;  // known only up to its horizon
    if (t == tr.times.back()) return tr.states.back();
    std::size_t i = std::size_t((t - tr.times.front()) / tr.dt());
    i = std::min(i, tr.size() - 2);
    double s = (t - tr.times[i]) / (tr.times[i + 1] - tr.times[i]);
    VectorField v = tr.states[i];
    v *= 1.0 - s;
    v.axpy(s, tr.states[i + 1]);
    return v;
  }
  // w_m = w^(p) + w^(s) (+ w^(ns) when available)
  VectorField w(double t, bool* complete = nullptr) const {
    VectorField v = wp(t);
    if (pert) v += pert->ws(t);
    auto c = wns(t);
    if (c) v += *c;
    if (complete) *complete = c.has_value();
    return v;
  }

  json to_json() const {
    json j = {{"m", m}, {"lambda", lambda}, {"C0", C0}, {"checks", checks_json(checks)}};
    json n = json::array();
    for (auto& e : norms) n.push_back(e.to_json());
    j["norms"] = n;
    if (!fns_record.is_null()) j["corrector"] = fns_record;
    return j;
  }
};

struct RunOptions {
  bool identities = true;
  bool contract = true;
  bool corrector = true;
  bool norms = true;
};

struct BranchState {
  RunConfig config;
  ParamSchedule schedule;
  Grid grid{16};
  std::shared_ptr<const ConcentrationProfile> profile;
  std::vector<LevelState> levels;  // levels[m-1]
  std::vector<Check> cutoff_checks;
  std::vector<Check> pair_checks;
  json separation;
  std::map<std::string, double> seconds;  // wall time per stage, kept out of the ledger

  const LevelState& level(int m) const {
    if (m < 1 || m > int(levels.size()) || !levels[m - 1].built())
      throw ConstructionError("level " + std::to_string(m) + " has not been built");
    return levels[m - 1];
  }
  double t_star() const { return 1.0 / (schedule.lambda(1) * schedule.lambda(1)); }

  json ledger() const {
    json j;
    j["schema"] = kLedgerSchema;
    j["config"] = config.to_json();
    j["schedule"] = schedule.to_json();
    j["cutoffs"] = checks_json(cutoff_checks);
    json lv = json::array();
    for (auto& l : levels)
      if (l.built() || !l.checks.empty()) lv.push_back(l.to_json());
    j["levels"] = lv;
    j["pair"] = checks_json(pair_checks);
    j["separation"] = separation.is_null() ? json::object() : separation;
    int pass = 0, fail = 0, info = 0;
    auto tally = [&](const json& c) {
      const std::string s = c.at("status");
      (s == "pass" ? pass : s == "fail" ? fail : info)++;
    };
    for (auto& c : j["cutoffs"]) tally(c);
    for (auto& l : j["levels"]) {
      for (auto& c : l["checks"]) tally(c);
      for (auto& c : l["norms"]) tally(c);
    }
    for (auto& c : j["pair"]) tally(c);
    if (j["separation"].contains("checks"))
      for (auto& c : j["separation"]["checks"]) tally(c);
    j["summary"] = {{"pass", pass}, {"fail", fail}, {"report_only", info}};
    return j;
  }
};

class Stopwatch {
 public:
  Stopwatch() : t0_(std::chrono::steady_clock::now()) {}
  double seconds() const {
    return std::chrono::duration<double>(std::chrono::steady_clock::now() - t0_).count();
  }

 private:
  std::chrono::steady_clock::time_point t0_;
};

inline BranchState init_branch(const RunConfig& cfg) {
  cfg.validate();
  BranchState B;
  B.config = cfg;
  B.schedule = parameter_schedule(cfg);
  B.grid = Grid(cfg.grid);
  B.levels.resize(cfg.levels);
  return B;
}

inline const ConcentrationProfile& branch_profile(BranchState& B) {
  if (!B.profile) {
    Stopwatch sw;
    B.profile = std::make_shared<const ConcentrationProfile>(
        ConcentrationProfile::build(B.config.profile_resolution, B.config.profile_half_width));
    B.seconds["profile"] += sw.seconds();
  }
  return *B.profile;
}

// Omega-tilde area fractions for every q whose cutoff level lies in the schedule.
inline void run_cutoff_checks(BranchState& B) {
  B.cutoff_checks.clear();
  for (int q = 1; 2 * q - 1 <= B.schedule.levels(); ++q) {
    CutoffSystem cs = build_cutoffs(B.schedule, q);
    const std::string tag = "q" + std::to_string(q);
    B.cutoff_checks.push_back(check_le("omega_tilde_fraction_" + tag, "area of the widened cutoff set",
                                       cs.omega_tilde_fraction(), std::ldexp(1.0, -2 * q + 1)));
    B.cutoff_checks.push_back(check_info("omega_fraction_" + tag, "area of the plateau set", cs.omega_fraction()));
    B.cutoff_checks.push_back(check_info("cutoff_min_grid_" + tag, "grid needed to resolve the cutoff transition",
                                         double(cs.min_resolving_grid()),
                                         cs.resolvable(B.grid) ? "resolved" : "not resolved on this grid"));
  }
}

// ---------------------------------------------------------------------------
// Norm reports

namespace detail {

struct Sampled {
  std::vector<double> t;
  double h = 0.0;
};

inline Sampled norm_times(double lambda, int count) {
  Sampled s;
  s.h = 1.0 / (lambda * lambda);
  for (int i = 0; i < count; ++i) s.t.push_back(i * s.h);
  return s;
}

}  // namespace detail

// Measured-vs-target entries for every inductive bound that applies to level m.
inline std::vector<NormEntry> level_norms(const BranchState& B, const LevelState& L) {
  const int j = L.m;
  const double lam = L.lambda, c34 = std::pow(L.C0, 0.75);
  const bool seed = !L.pert;
  const double lam_prev = j > 1 ? B.schedule.lambda(j - 1) : 0.0;
  auto T = detail::norm_times(lam, B.config.norm_samples);
  const double kappa = lam * lam;
  const double kappa_s = 2 * lam * lam + lam_prev * lam_prev;

  // per sample: orders of w^(p), w^(s), u_j and w_j, lifts and L^r pieces
  std::vector<std::vector<double>> wpo, wso, uo, wo, Ro, dRo, Rso;
  std::vector<double> wp_lr[2], wp_w1r[2], ws_lr[2], ws_w1r[2], w_lr[2], w_w1r[2];
  const double rs[2] = {2.0, 4.0};
  bool complete = true;
  for (double t : T.t) {
    VectorField wp = L.wp(t);
    VectorField ws = L.ws(t);
    bool c = true;
    VectorField w = L.w(t, &c);
    complete = complete && c;
    VectorField u = w;
    for (int l = j - 2; l >= 1; l -= 2) {
      bool cl = true;
      u += B.level(l).w(t, &cl);
      complete = complete && cl;
    }
    wpo.push_back(cn_orders(components(wp), 3, CnMode::multi_index));
    uo.push_back(cn_orders(components(u), 2, CnMode::multi_index));
    wo.push_back(cn_orders(components(w), 2, CnMode::multi_index));
    Ro.push_back(cn_orders(detail::sym_components(L.level->Rwp(t)), 4, CnMode::multi_index));
    dRo.push_back(cn_orders(detail::sym_components(L.level->dRwp_dt(t)), 4, CnMode::multi_index));
    if (!seed) {
      wso.push_back(cn_orders(components(ws), 3, CnMode::multi_index));
      Rso.push_back(cn_orders(detail::sym_components(calderon_lift(ws)), 4, CnMode::multi_index));
    }
    for (int r = 0; r < 2; ++r) {
      auto lr = [&](const VectorField& v, std::vector<double>& a, std::vector<double>& b) {
        double x = lp_norm(components(v), rs[r]);
        a.push_back(x);
        b.push_back(x + lp_norm(detail::grad_components(v), rs[r]));
      };
      lr(wp, wp_lr[r], wp_w1r[r]);
      if (!seed) lr(ws, ws_lr[r], ws_w1r[r]);
      lr(w, w_lr[r], w_w1r[r]);
    }
  }
  auto sup_over = [](const std::vector<std::vector<double>>& o, int N) {
    double m = 0.0;
    for (auto& x : o) m = std::max(m, detail::cumulative(x, N));
    return m;
  };
  auto order_over = [](const std::vector<std::vector<double>>& o, int N) {
    double m = 0.0;
    for (auto& x : o) m = std::max(m, x.at(N));
    return m;
  };
  auto l1_over = [&](const std::vector<std::vector<double>>& o, int N, double k) {
    std::vector<double> v;
    for (auto& x : o) v.push_back(detail::cumulative(x, N));
    return detail::decay_integral(v, T.h, k);
  };
  auto l2_of = [&](const std::vector<double>& v, double k) {
    std::vector<double> sq;
    for (double x : v) sq.push_back(x * x);
    return std::sqrt(detail::decay_integral(sq, T.h, 2 * k));
  };
  const std::string js = std::to_string(j);
  const std::string partial_note = complete ? "" : "w^(ns) not computed; measured on w^(p) + w^(s) only";
  std::vector<NormEntry> out;
  auto add = [&](std::string name, std::string ref, std::string shape, std::optional<double> v, double target,
                 std::string note = {}) {
    out.push_back({std::move(name), std::move(ref), std::move(shape), v, target, std::move(note)});
  };

  // u_j and w_j
  double u_inf = 0.0, w_inf = 0.0;
  for (auto& x : uo) u_inf = std::max(u_inf, x[0]);
  for (auto& x : wo) w_inf = std::max(w_inf, x[0]);
  add("u" + js + "_Linf", "velocity sup bound", "C0 lambda_j", u_inf, L.C0 * lam, partial_note);
  add("u" + js + "_L1C2", "velocity L1 C2 bound", "C0 lambda_j", l1_over(uo, 2, kappa), L.C0 * lam, partial_note);
  const int q = j / 2;
  const double c1_target = j % 2 == 0 ? L.C0 * q : L.C0 * (q + 1);
  add("u" + js + "_L1C1", "velocity L1 C1 bound", j % 2 == 0 ? "C0 q (j = 2q)" : "C0 (q+1) (j = 2q+1)",
      l1_over(uo, 1, kappa), c1_target, partial_note);
  add("w" + js + "_Linf", "increment sup bound", "C0 lambda_m / 2", w_inf, 0.5 * L.C0 * lam, partial_note);
  add("w" + js + "_L1C1", "increment L1 C1 bound", "C0 / 2", l1_over(wo, 1, kappa), 0.5 * L.C0, partial_note);
  add("w" + js + "_L1C2", "increment L1 C2 bound", "C0 lambda_m / 2", l1_over(wo, 2, kappa), 0.5 * L.C0 * lam,
      partial_note);

  // lifts
  for (int N = 0; N <= 4; ++N) {
    const std::string Ns = std::to_string(N);
    add("Rwp" + js + "_C" + Ns, "lift of w^(p), L-inf-t C^N", "C0^{3/4} lambda_j^N", sup_over(Ro, N),
        c34 * std::pow(lam, N));
    add("dtRwp" + js + "_C" + Ns, "time derivative of the lift of w^(p), L-inf-t C^N", "C0^{3/4} lambda_j^{N+2}",
        sup_over(dRo, N), c34 * std::pow(lam, N + 2));
    if (seed)
      add("Rws" + js + "_C" + Ns, "lift of w^(s), L-inf-t C^N", "C0^{3/4} lambda_{j-1}^N", 0.0, 0.0,
          "w^(s)_1 = 0; lambda_0 undefined");
    else
      add("Rws" + js + "_C" + Ns, "lift of w^(s), L-inf-t C^N", "C0^{3/4} lambda_{j-1}^N", sup_over(Rso, N),
          c34 * std::pow(lam_prev, N));
  }
  // w^(p), w^(s) in L-inf-t C^N and L1-t C^N
  for (int N = 0; N <= 3; ++N) {
    const std::string Ns = std::to_string(N);
    add("wp" + js + "_C" + Ns, "w^(p) L-inf-t C^N", "C0^{3/4} lambda_j^{N+1}", sup_over(wpo, N),
        c34 * std::pow(lam, N + 1));
    if (!seed)
      add("ws" + js + "_C" + Ns, "w^(s) L-inf-t C^N", "C0^{3/4} lambda_{j-1}^{N+1}", sup_over(wso, N),
          c34 * std::pow(lam_prev, N + 1));
  }
  for (int N = 0; N <= 2; ++N) {
    const std::string Ns = std::to_string(N);
    add("wp" + js + "_L1C" + Ns, "w^(p) L1-t C^N", "C0^{3/4} lambda_j^{N-1}", l1_over(wpo, N, kappa),
        c34 * std::pow(lam, N - 1));
    if (!seed)
      add("ws" + js + "_L1C" + Ns, "w^(s) L1-t C^N", "C0^{3/4} lambda_j^{-2} lambda_{j-1}^{N+1}",
          l1_over(wso, N, kappa_s), c34 * std::pow(lam, -2) * std::pow(lam_prev, N + 1));
  }
  // Lebesgue-in-space bounds, r = 2 and 4
  for (int r = 0; r < 2; ++r) {
    const std::string rs_ = std::to_string(int(rs[r]));
    const double tgt = c34 * std::pow(2.0, -j / rs[r]);
    add("wp" + js + "_L2Lr" + rs_, "w^(p) L2-t L^r", "C0^{3/4} 2^{-j/r}", l2_of(wp_lr[r], kappa), tgt);
    add("wp" + js + "_L1W1r" + rs_, "w^(p) L1-t W^{1,r}", "C0^{3/4} 2^{-j/r}",
        detail::decay_integral(wp_w1r[r], T.h, kappa), tgt);
    if (!seed) {
      add("ws" + js + "_L2Lr" + rs_, "w^(s) L2-t L^r", "C0^{3/4} 2^{-j/r}", l2_of(ws_lr[r], kappa_s), tgt);
      add("ws" + js + "_L1W1r" + rs_, "w^(s) L1-t W^{1,r}", "C0^{3/4} 2^{-j/r}",
          detail::decay_integral(ws_w1r[r], T.h, kappa_s), tgt);
    }
    const double wt = L.C0 * std::pow(2.0, -j / rs[r]);
    add("w" + js + "_L2Lr" + rs_, "increment L2-t L^r", "C0 2^{-m/r}", l2_of(w_lr[r], kappa), wt, partial_note);
    add("w" + js + "_L1W1r" + rs_, "increment L1-t W^{1,r}", "C0 2^{-m/r}", detail::decay_integral(w_w1r[r], T.h, kappa),
        wt, partial_note);
  }
  (void)order_over;

  // corrector bounds
  if (!seed) {
    const double t1 = std::pow(lam_prev, -10.0), t2 = std::sqrt(lam);
    if (L.fns) {
      add("wns" + js + "_CL_Bm12_L1_B32", "corrector, L~-inf-t B^{-1/2} + L1-t B^{3/2}", "lambda_{j-1}^{-10}",
          L.fns->cl_inf_bm12 + L.fns->l1_b32, t1);
      const auto& tr = L.fns->trajectory;
      double b0 = trajectory_norm(tr, kInf, 0.0, kInf, 1.0), b2 = trajectory_norm(tr, 1.0, 2.0, kInf, 1.0);
      add("wns" + js + "_CL_B0_L1_B2", "corrector, L~-inf-t B^0 + L1-t B^2", "lambda_j^{1/2}", b0 + b2, t2);
    } else {
      add("wns" + js + "_CL_Bm12_L1_B32", "corrector, L~-inf-t B^{-1/2} + L1-t B^{3/2}", "lambda_{j-1}^{-10}",
          std::nullopt, t1, "corrector not computed");
      add("wns" + js + "_CL_B0_L1_B2", "corrector, L~-inf-t B^0 + L1-t B^2", "lambda_j^{1/2}", std::nullopt, t2,
          "corrector not computed");
    }
    // BMO^-1 at t = 0 only: the Carleson proxy is the most expensive norm here
    VectorField u0 = L.w(0.0);
    for (int l = j - 2; l >= 1; l -= 2) u0 += B.level(l).w(0.0);
    add("u" + js + "_BMOm1", "velocity L-inf-t BMO^-1 bound", "C0", bmo_inv_norm(u0), L.C0,
        "evaluated at t = 0; w^(ns)(0) = 0 exactly");
  }
  return out;
}

// ---------------------------------------------------------------------------
// Level iteration

// NS residual of a time field from five samples around t with spacing 1e-3 lambda^-2.
inline double sampled_ns_residual(const VectorAt& u, double t, double lambda, const VectorAt& forcing = {}) {
  const double h = 1e-3 / (lambda * lambda);
  Trajectory tr;
  for (int i = -2; i <= 2; ++i) {
    double s = std::max(t, 2 * h) + i * h;
    tr.times.push_back(s);
    tr.states.push_back(u(s));
  }
  return ns_residual(tr, forcing);
}

inline double rel(double num, double den) { return den > 0.0 ? num / den : num; }

inline LevelState& run_level(int m, BranchState& B, const RunOptions& opt = {}) {
  if (m < 1 || m > int(B.levels.size())) throw ConfigError("run_level: level " + std::to_string(m) + " is outside 1.." +
                                                           std::to_string(B.levels.size()));
  for (int l = 1; l < m; ++l)
    if (!B.levels[l - 1].built())
      throw ConstructionError("run_level: level " + std::to_string(l) + " must be built before level " +
                              std::to_string(m));
  const RunConfig& cfg = B.config;
  LevelState& L = B.levels[m - 1];
  L = LevelState{};
  L.m = m;
  L.lambda = B.schedule.lambda(m);
  Stopwatch sw;

  if (m == 1) {
    auto seed = std::make_shared<const SeedLevel>(B.grid, B.schedule.lambda_int(1), cfg.seed_amplitude);
    L.level = seed;
    L.C0 = select_C0(B.schedule, *seed);
    B.seconds["build_1"] += sw.seconds();
    if (opt.identities) {
      VectorField w0 = seed->wp(0.0);
      L.checks.push_back(check_le("div_wp", "w^(p) is divergence free", rel(sup_norm(divergence(w0)), sup_norm(w0)), 1e-11));
      auto hm = heat_mode_check(B.grid, B.schedule.lambda_int(1), 0.5 * B.t_star());
      L.checks.push_back(check_le("heat_mode", "heat operator kills e^{-lambda^2 t} e^{i lambda k.x}", hm.analytic, 1e-10));
      L.checks.push_back(check_le("heat_mode_fd", "same with a 4th-order time difference", hm.finite_difference, 1e-6));
      VectorField Rd = divergence(seed->Rwp(0.0)) - w0;
      L.checks.push_back(check_le("calderon_lift", "div of the lift returns w^(p)", rel(sup_norm(Rd), sup_norm(w0)), 1e-12));
      double res = sampled_ns_residual([&](double t) { return seed->wp(t); }, B.t_star(), L.lambda);
      L.checks.push_back(check_le("seed_ns_residual", "shear seed solves unforced NS", res, 1e-8));
    }
    if (opt.norms && cfg.norms) L.norms = level_norms(B, L);
    B.seconds["level_1"] += sw.seconds();
    return L;
  }

  const LevelState& P = B.level(m - 1);
  L.C0 = select_C0(B.schedule, *P.level);
  std::optional<ScalarField> chi;
  if (!P.level->is_seed()) {
    CutoffSystem cs(B.schedule, m - 1, cfg.profile_half_width);
    if (!cs.resolvable(B.grid)) {
      L.checks.push_back(check_failed(
          "cutoff_resolved", "cutoff transition width against the grid spacing",
          "cutoff transition width " + fmt_double(cs.width()) + " needs n >= " + std::to_string(cs.min_resolving_grid()) +
              "; level not built",
          cs.width(), 4 * B.grid.h()));
      return L;
    }
    chi = cs.field(B.grid);
  }
  PerturbationOptions po;
  po.lift_modes = cfg.lift_modes;
  std::shared_ptr<const PerturbationLevel> pl;
  try {
    pl = std::make_shared<const PerturbationLevel>(m, B.schedule, P.level, branch_profile(B), L.C0, std::move(chi), po);
  } catch (const ConstructionError& e) {
    L.checks.push_back(check_failed("construction", "level construction", e.what()));
    return L;
  }
  L.level = pl;
  L.pert = pl;
  B.seconds["build_" + std::to_string(m)] += sw.seconds();
  const double lam2 = L.lambda * L.lambda;

  if (opt.identities) {
    Stopwatch si;
    const double ts[2] = {0.0, 0.5 / lam2};
    double div = 0, forms = 0, split = 0, lift = 0, divs = 0;
    for (double t : ts) {
      VectorField w = pl->wp(t);
      const double ws_ = sup_norm(w);
      div = std::max(div, rel(sup_norm(divergence(w)), ws_));
      WpSplit s = pl->split(t);
      VectorField sum = s.main + s.rem1 + s.rem2 + s.rem3;
      split = std::max(split, rel(sup_norm(sum - w), ws_));
      lift = std::max(lift, rel(sup_norm(divergence(pl->Rwp(t)) - w), ws_));
      VectorField a = pl->ws(t), b = pl->ws_raw(t);
      forms = std::max(forms, rel(sup_norm(a - b), sup_norm(a)));
      divs = std::max(divs, rel(sup_norm(divergence(a)), sup_norm(a)));
    }
    L.checks.push_back(check_le("div_wp", "w^(p) is divergence free", div, 1e-11));
    L.checks.push_back(check_le("div_ws", "w^(s) is divergence free", divs, 1e-11));
    L.checks.push_back(check_le("initial_match", "w^(s)(0) equals the previous w^(p)(0)", pl->initial_mismatch(), 1e-11));
    L.checks.push_back(check_le("ws_forms", "closed and product forms of w^(s) agree", forms, 1e-11));
    L.checks.push_back(check_le("split_sum", "main part plus remainders gives w^(p)", split, 1e-12));
    L.checks.push_back(check_le("calderon_lift", "div of the lift returns w^(p)", lift, 1e-12));
    if (pl->has_cutoff())
      L.checks.push_back(
          check_le("support_consistency", "cutoff times previous w^(p) equals previous w^(p)", pl->support_violation(0.0), 1e-10));
    auto hm = heat_mode_check(B.grid, B.schedule.lambda_int(m), 0.5 / lam2);
    L.checks.push_back(check_le("heat_mode", "heat operator kills e^{-lambda^2 t} e^{i lambda k.x}", hm.analytic, 1e-10));
    L.checks.push_back(check_le("heat_mode_fd", "same with a 4th-order time difference", hm.finite_difference, 1e-6));
    B.seconds["identities_" + std::to_string(m)] += si.seconds();
  }

  if (opt.contract) {
    Stopwatch sc;
    static const double fr[] = {0.0, 0.25, 0.5, 1.0, 2.0, 4.0, 8.0, 16.0};
    const int nt = std::min<int>(cfg.check_times, 8);
    double worst = 0.0;
    std::string detail;
    for (int i = 0; i < nt; ++i) {
      const double t = fr[i] / lam2;
      auto res = pl->assemble_F1(t, false);
      const F1Check& c = res.second;
      if (c.relative >= worst) {
        worst = c.relative;
        detail = "worst at t = " + fmt_double(t) + ";" + c.breakdown();
      }
      L.checks.push_back(check_le("F1_contract_t" + std::to_string(i), "pressure absorption of div(w^(p) w^(p)) + d_t w^(s)",
                                  c.relative, 1e-8, "t = " + fmt_double(t)));
    }
    L.checks.push_back(check_info("F1_contract_terms", "term sizes at the worst sample", worst, detail));
    B.seconds["contract_" + std::to_string(m)] += sc.seconds();
  }

  if (opt.corrector) {
    Stopwatch sf;
    SolverConfig sc;
    const double lam1 = B.schedule.lambda(1), lam_max = B.schedule.lambda(m);
    sc.T_end = cfg.horizon / (lam1 * lam1);
    sc.dt = cfg.solver_dt > 0 ? cfg.solver_dt : 0.25 / (lam_max * lam_max);
    sc.dt = std::min(sc.dt, sc.T_end / 8);  // the time norms need at least 8 samples
    sc.cfl_safety = cfg.cfl_safety;
    sc.max_steps = cfg.max_steps;
    sc.save_every = std::max<long>(1, sc.steps() / 64);
    // u_{m-2} + w^(p)_m + w^(s)_m, and F_m = F^(1) + F^(2)
    const BranchState* Bp = &B;
    auto lower = [Bp, m](double t) -> std::optional<VectorField> {
      if (m - 2 < 1) return std::nullopt;
      VectorField u = Bp->level(m - 2).w(t);
      for (int l = m - 4; l >= 1; l -= 2) u += Bp->level(l).w(t);
      return u;
    };
    FnsInputs in;
    in.coupling = [pl, lower](double t) {
      VectorField c = pl->wp(t) + pl->ws(t);
      if (auto u = lower(t)) c += *u;
      return c;
    };
    in.forcing = [pl, lower](double t) {
      VectorField F = pl->assemble_F1_terms(t).F();
      auto u = lower(t);
      F += pl->assemble_F2(t, u ? &*u : nullptr);
      return F;
    };
    FnsPreflight pf = preflight_fns(B.grid, in, sc);
    L.preflight = pf;
    L.fns_record = {{"T_end", sc.T_end},
                    {"dt", pf.dt},
                    {"cfl_dt", pf.cfl_dt},
                    {"steps", pf.steps},
                    {"forcing_evaluations", pf.forcing_evaluations},
                    {"coupling_sup", pf.coupling_sup},
                    {"max_steps", sc.max_steps},
                    {"feasible", pf.feasible}};
    if (!pf.feasible) {
      L.checks.push_back(check_failed("corrector_solved", "forced corrector with zero initial datum", "infeasible: " + pf.reason,
                                      double(pf.steps), double(sc.max_steps)));
    } else {
      try {
        L.fns = solve_forced_ns(B.grid, in, sc);
        const auto& tr = L.fns->trajectory;
        L.fns_record["samples"] = tr.size();
        L.fns_record["cl_inf_bm12"] = L.fns->cl_inf_bm12;
        L.fns_record["l1_b32"] = L.fns->l1_b32;
        L.checks.push_back(check_le("corrector_initial_zero", "corrector starts from zero", sup_norm(tr.states.front()), 0.0));
        // same-norm size of w^(p) over the corrector samples
        ComponentsAt wpat = [pl](double t) { return components(pl->wp(t)); };
        double wpn = chemin_lerner_norm(wpat, tr.times.front(), tr.times.back(), int(tr.size()), kInf, -0.5, kInf, 1.0);
        L.fns_record["wp_cl_inf_bm12"] = wpn;
        L.checks.push_back(check_le("corrector_small", "corrector much smaller than w^(p) in L~-inf-t B^{-1/2}",
                                    L.fns->cl_inf_bm12, 1e-3 * wpn));
      } catch (const SolverError& e) {
        L.checks.push_back(check_failed("corrector_solved", "forced corrector with zero initial datum", e.what()));
      }
    }
    B.seconds["corrector_" + std::to_string(m)] += sf.seconds();
  }

  if (opt.norms && cfg.norms) {
    Stopwatch sn;
    L.norms = level_norms(B, L);
    B.seconds["norms_" + std::to_string(m)] += sn.seconds();
  }
  B.seconds["level_" + std::to_string(m)] += sw.seconds();
  return L;
}

// ---------------------------------------------------------------------------
// Branches and separation

// Sum of w_l over levels l <= top with the parity of top, in increasing order.
inline VectorField branch_sum(const BranchState& B, int top, double t, bool* complete = nullptr) {
  VectorField u(B.grid);
  if (complete) *complete = true;
  for (int l = (top % 2 == 0 ? 2 : 1); l <= top; l += 2) {
    bool c = true;
    u += B.level(l).w(t, &c);
    if (complete) *complete = *complete && c;
  }
  return u;
}

// u_odd and u_even through M_max at time t.
struct BranchPair {
  VectorField odd, even;
  bool complete = true;
};
inline BranchPair branch_pair(const BranchState& B, double t) {
  const int M = int(B.levels.size());
  BranchPair p{VectorField(B.grid), VectorField(B.grid)};
  bool c1 = true, c2 = true;
  const int top_odd = M % 2 ? M : M - 1, top_even = M % 2 ? M - 1 : M;
  if (top_odd >= 1) p.odd = branch_sum(B, top_odd, t, &c1);
  if (top_even >= 2) p.even = branch_sum(B, top_even, t, &c2);
  p.complete = c1 && c2;
  return p;
}

inline void build_solution_pair(BranchState& B) {
  Stopwatch sw;
  const int M = int(B.levels.size());
  for (int l = 1; l <= M; ++l) B.level(l);  // throws if any level is missing
  B.pair_checks.clear();
  const double ts = B.t_star();

  // additivity: incremental u_{m-2} + w_m against the sum taken top-down
  double add = 0.0;
  for (int m = 1; m <= M; ++m)
    for (double t : {0.0, ts}) {
      VectorField inc = (m > 2 ? branch_sum(B, m - 2, t) : VectorField(B.grid)) + B.level(m).w(t);
      VectorField direct(B.grid);
      for (int l = m; l >= 1; l -= 2) direct += B.level(l).w(t);
      add = std::max(add, rel(sup_norm(inc - direct), sup_norm(direct)));
    }
  B.pair_checks.push_back(check_le("branch_additivity", "u_m = u_{m-2} + w_m by direct summation", add, 1e-12));

  // u_odd(0) - u_even(0) leaves only the unmatched top w^(p); w^(ns)(0) = 0 by its zero initial datum
  BranchPair p0 = branch_pair(B, 0.0);
  VectorField tail = B.level(M).wp(0.0);
  VectorField diff = p0.odd - p0.even;
  VectorField resid = diff;
  resid.axpy(M % 2 ? -1.0 : 1.0, tail);
  B.pair_checks.push_back(check_le("initial_telescoping", "u_odd(0) - u_even(0) against the top w^(p)(0)", sup_norm(resid), 1e-11,
                                   "absolute sup norm; w^(ns)(0) = 0 exactly"));
  const double gap0 = sup_norm(diff), tail_sup = sup_norm(tail);
  B.pair_checks.push_back(check_le("initial_gap_equals_tail", "|u_odd(0) - u_even(0)| against |w^(p)_M(0)|",
                                   std::abs(gap0 - tail_sup), 1e-11));
  B.pair_checks.push_back(check_info("truncation_tail", "sup of the last increment at t = 0", tail_sup));

  // NS residual of each branch, sampled around lambda_1^-2
  auto branch_residual = [&](bool odd, const std::string& name) {
    const double lam = B.schedule.lambda(1);
    VectorAt u = [&](double t) { BranchPair q = branch_pair(B, t); return odd ? q.odd : q.even; };
    // a computed corrector is only known at its saved samples, so difference on those
    const Trajectory* ctr = nullptr;
    bool missing = false;
    for (int l = (odd ? 1 : 2); l <= M; l += 2) {
      if (B.level(l).fns) ctr = &B.level(l).fns->trajectory;
      if (!B.level(l).corrector_available()) missing = true;
    }
    if (missing) {
      B.pair_checks.push_back(check_failed(name, "branch solves unforced NS", "corrector w^(ns) missing in this branch"));
      return;
    }
    if (!ctr) {
      B.pair_checks.push_back(check_le(name, "branch solves unforced NS", sampled_ns_residual(u, ts, lam), 1e-8));
      return;
    }
    std::size_t i = std::size_t(std::llround((ts - ctr->times.front()) / ctr->dt()));
    i = std::clamp<std::size_t>(i, 2, ctr->size() - 3);
    Trajectory tr;
    for (std::size_t k = i - 2; k <= i + 2; ++k) {
      tr.times.push_back(ctr->times[k]);
      tr.states.push_back(u(ctr->times[k]));
    }
    B.pair_checks.push_back(check_le(name, "branch solves unforced NS", ns_residual(tr), 1e-8,
                                     "differenced on the corrector samples around t = " + fmt_double(tr.times[2])));
  };
  branch_residual(true, "ns_residual_odd");
  branch_residual(false, "ns_residual_even");
  B.seconds["pair"] += sw.seconds();
}

inline json separation_report(BranchState& B) {
  Stopwatch sw;
  const int M = int(B.levels.size());
  for (int l = 1; l <= M; ++l) B.level(l);
  const double lam1 = B.schedule.lambda(1), ts = B.t_star();
  // M0 = e^{-1} |lambda_1 sin(lambda_1 x1)|_{B^{-1}_{inf,inf}}
  ScalarField s(B.grid);
  s.mode(int(lam1), 0) = cplx(0.0, -0.5 * lam1);
  s.mode(-int(lam1), 0) = cplx(0.0, 0.5 * lam1);
  const double M0 = std::exp(-1.0) * besov_norm(s, -1.0, kInf, kInf);
  BranchPair p = branch_pair(B, ts);
  const double gap = besov_norm(p.odd - p.even, -1.0, kInf, kInf);
  double decay = 0.0;
  if (B.schedule.levels() >= 2) {
    const double lam2 = B.schedule.lambda(2);
    decay = std::exp(-lam2 * lam2 * ts);
  }
  const bool active = M >= 2 ? decay < 1e-6 : true;
  std::vector<Check> checks;
  json r = {{"t", ts}, {"M0", M0}, {"levels", M}, {"decay_factor", decay}, {"decay_active", active}};
  if (p.complete) {
    r["gap_norm"] = gap;
    r["ratio"] = gap / M0;
    if (active)
      checks.push_back(check_ge("separation", "gap at lambda_1^-2 against M0 / 2", gap / M0, 0.5));
    else
      checks.push_back(check_info("separation", "gap at lambda_1^-2 against M0 / 2", gap / M0, "decay precondition not met"));
  } else {
    r["gap_norm"] = nullptr;
    r["ratio"] = nullptr;
    r["gap_without_corrector"] = gap;
    r["ratio_without_corrector"] = gap / M0;
    checks.push_back(check_failed("separation", "gap at lambda_1^-2 against M0 / 2",
                                  "corrector w^(ns) not available at this time; gap without it is " + fmt_double(gap) + " (ratio " +
                                      fmt_double(gap / M0) + ")",
                                  std::nullopt, 0.5));
  }
  // contribution of the levels above 1 at the separation time
  if (M >= 2) {
    VectorField hi(B.grid);
    for (int l = 2; l <= M; ++l) hi += B.level(l).wp(ts) + B.level(l).ws(ts);
    const double c = besov_norm(hi, -1.0, kInf, kInf) / M0;
    r["upper_levels_relative"] = c;
    checks.push_back(check_le("level2_decay_factor", "e^{-lambda_2^2 / lambda_1^2}", decay, 1e-10));
    checks.push_back(check_info("upper_levels_relative", "w^(p) + w^(s) of levels >= 2 at lambda_1^-2 against M0", c,
                                "decay factor times the level amplitude, which grows with C0"));
  }
  r["checks"] = checks_json(checks);
  B.separation = r;
  B.seconds["separation"] += sw.seconds();
  return r;
}

// ---------------------------------------------------------------------------
// Persistence and export

inline std::filesystem::path level_dir(const std::filesystem::path& out, int m) {
  return out / ("level_" + std::to_string(m));
}

// w^(p)(0), w^(s)(0) as NSF2, the level record as JSON and the schedule as INI.
inline void save_level_state(const BranchState& B, const LevelState& L, const std::filesystem::path& out) {
  auto dir = level_dir(out, L.m);
  if (L.built()) {
    write_nsf2(dir / "wp0.nsf2", snapshot_of(L.wp(0.0), 0.0));
    if (L.pert) write_nsf2(dir / "ws0.nsf2", snapshot_of(L.ws(0.0), 0.0));
  }
  atomic_write(dir / "level.json", L.to_json().dump(2) + "\n");
  atomic_write(dir / "config.ini", B.config.to_ini());
}

inline void write_ledger(const BranchState& B, const std::filesystem::path& path) {
  atomic_write(path, B.ledger().dump(2) + "\n");
}

inline int ledger_exit_code(const json& ledger) { return ledger.at("summary").at("fail").get<int>() > 0 ? 1 : 0; }

inline std::string csv_escape(const std::string& s) {
  if (s.find_first_of(",\"\n") == std::string::npos) return s;
  std::string o = "\"";
  for (char c : s) o += c == '"' ? std::string("\"\"") : std::string(1, c);
  return o + "\"";
}

inline std::string ledger_csv(const json& ledger) {
  std::ostringstream o;
  o.precision(17);
  o << "section,name,value,target,status\n";
  auto num = [](const json& v) {
    if (v.is_null()) return std::string();
    std::ostringstream s;
    s.precision(17);
    s << v.get<double>();
    return s.str();
  };
  auto row = [&](const std::string& sec, const json& c, const char* vkey) {
    o << csv_escape(sec) << "," << csv_escape(c.at("name").get<std::string>()) << "," << num(c.at(vkey)) << ","
      << num(c.at("target")) << "," << c.at("status").get<std::string>() << "\n";
  };
  for (auto& c : ledger.at("cutoffs")) row("cutoffs", c, "value");
  for (auto& l : ledger.at("levels")) {
    const std::string sec = "level_" + std::to_string(l.at("m").get<int>());
    for (auto& c : l.at("checks")) row(sec, c, "value");
    for (auto& c : l.at("norms")) row(sec + "_norms", c, "measured");
  }
  for (auto& c : ledger.at("pair")) row("pair", c, "value");
  if (ledger.at("separation").contains("checks"))
    for (auto& c : ledger.at("separation").at("checks")) row("separation", c, "value");
  return o.str();
}

// Whole toy pipeline: cutoffs, every level, the pair and the separation.
inline BranchState run_pipeline(const RunConfig& cfg, const RunOptions& opt = {}) {
  BranchState B = init_branch(cfg);
  run_cutoff_checks(B);
  for (int m = 1; m <= cfg.levels; ++m) {
    LevelState& L = run_level(m, B, opt);
    if (!L.built()) {
      B.levels.resize(m);
      break;
    }
  }
  bool all = true;
  for (auto& l : B.levels) all = all && l.built();
  if (all) {
    build_solution_pair(B);
    separation_report(B);
  }
  return B;
}

}  // namespace nsbmo
