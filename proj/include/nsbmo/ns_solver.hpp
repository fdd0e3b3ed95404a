#pragma once
// Pseudo-spectral time stepping on T^2: exact heat factor plus classical RK4
// for the projected nonlinearity (Lawson form). Used for full NS, the forced
// corrector system and the scalar transport-diffusion equation.

#include <cmath>
#include <functional>
#include <optional>
#include <string>
#include <vector>

#include "nsbmo/construction.hpp"
#include "nsbmo/function_spaces.hpp"
#include "nsbmo/spectral.hpp"

namespace nsbmo {

class SolverError : public std::runtime_error {
 public:
  using std::runtime_error::runtime_error;
};

using VectorAt = std::function<VectorField(double)>;

struct SolverConfig {
  double dt = 1e-3;
  double T_end = 1.0;
  double cfl_safety = 0.5;
  int save_every = 1;
  double blowup_factor = 1e6;
  // Runs estimated to need more steps than this are refused up front.
  long max_steps = 200000;
  void validate() const {
    if (!(dt > 0.0)) throw SolverError("solver: dt must be positive");
    if (!(T_end > 0.0)) throw SolverError("solver: T_end must be positive");
    if (!(cfl_safety > 0.0 && cfl_safety <= 1.0)) throw SolverError("solver: cfl_safety must lie in (0, 1]");
    if (save_every < 1) throw SolverError("solver: save_every must be at least 1");
  }
  long steps() const { return long(std::ceil(T_end / dt - 1e-9)); }
};

template <class F>
struct TrajectoryT {
  std::vector<double> times;
  std::vector<F> states;
  std::vector<double> forcing_sup;  // sup of the forcing at each saved time, empty if unforced
  std::size_t size() const { return times.size(); }
  double dt() const { return times.size() > 1 ? times[1] - times[0] : 0.0; }
  // Saved times must be uniform for the time norms and differences.
  void check_uniform(std::size_t min_samples, const char* what) const {
    if (times.size() < min_samples)
      throw SolverError(std::string(what) + ": need at least " + std::to_string(min_samples) + " samples, got " +
                        std::to_string(times.size()));
    const double h = dt();
    for (std::size_t i = 1; i < times.size(); ++i)
      if (std::abs(times[i] - times[i - 1] - h) > 1e-9 * h) throw SolverError(std::string(what) + ": samples are not uniform");
  }
};
using Trajectory = TrajectoryT<VectorField>;
using ScalarTrajectory = TrajectoryT<ScalarField>;

// One Lawson RK4 step of u' = Delta u + N(t, u).
template <class F, class Rhs>
F lawson_rk4_step(const F& u, double t, double h, Rhs&& N) {
  F k1 = N(t, u);
  F eu = heat_semigroup(u, 0.5 * h);
  F u2 = eu;
  u2.axpy(0.5 * h, heat_semigroup(k1, 0.5 * h));
  F k2 = N(t + 0.5 * h, u2);
  F u3 = eu;
  u3.axpy(0.5 * h, k2);
  F k3 = N(t + 0.5 * h, u3);
  F u4 = heat_semigroup(eu, 0.5 * h);
  u4.axpy(h, heat_semigroup(k3, 0.5 * h));
  F k4 = N(t + h, u4);
  // E(h) (u + h/6 k1) + h/3 E(h/2) (k2 + k3) + h/6 k4
  F out = u;
  out.axpy(h / 6, k1);
  out = heat_semigroup(out, h);
  k2 += k3;
  out.axpy(h / 3, heat_semigroup(k2, 0.5 * h));
  out.axpy(h / 6, k4);
  return out;
}

// div(w (x) w + w (x) U + U (x) w), dealiased.
inline VectorField advection_divergence(const VectorField& w, const VectorField* U = nullptr) {
  const int n = w.grid().n();
  std::array<Padded, 2> pw{Padded(w[0]), Padded(w[1])};
  std::array<Padded, 2> pu;
  if (U) pu = {Padded((*U)[0]), Padded((*U)[1])};
  MatrixField B(w.grid());
  for (int i = 0; i < 2; ++i)
    for (int j = i; j < 2; ++j) {
      Padded o = Padded::real_zeros(n);
      accumulate_product(o, 1.0, pw[i], pw[j]);
      if (U) {
        accumulate_product(o, 1.0, pw[i], pu[j]);
        accumulate_product(o, 1.0, pu[i], pw[j]);
      }
      B(i, j) = o.truncate();
      if (i != j) B(j, i) = B(i, j);
    }
  return divergence(B);
}

namespace detail {

// Caches coupling and forcing for the current and half-step stage times.
class StageCache {
 public:
  StageCache(const VectorAt* U, const VectorAt* F) : U_(U), F_(F) {}
  struct Entry {
    double t = -1.0;
    std::optional<VectorField> U, F;
  };
  const Entry& at(double t) {
    for (auto& e : slots_)
      if (e.t >= 0.0 && std::abs(e.t - t) <= 1e-12 * std::max(std::abs(t), 1e-300)) return e;
    Entry& e = slots_[next_];
    next_ = (next_ + 1) % slots_.size();
    e.t = t;
    e.U.reset();
    e.F.reset();
    if (U_ && *U_) e.U = (*U_)(t);
    if (F_ && *F_) e.F = (*F_)(t);
    return e;
  }

 private:
  const VectorAt* U_;
  const VectorAt* F_;
  std::array<Entry, 3> slots_;
  std::size_t next_ = 0;
};

inline void check_finite(double x, double t) {
  if (!std::isfinite(x)) throw SolverError("solver: non-finite state at t = " + fmt_double(t));
}

}  // namespace detail

// w' = Delta w - P[div(w (x) w + w (x) U + U (x) w) + F], w(0) = w0.
// U and F may be empty. The CFL bound dt <= cfl_safety h / max|w + U| is
// checked every step; growth of sup|w| beyond blowup_factor times its first
// nonzero value aborts.
inline Trajectory evolve_ns(const VectorField& w0, const VectorAt& U, const VectorAt& F, const SolverConfig& cfg) {
  cfg.validate();
  const Grid g = w0.grid();
  const long steps = cfg.steps();
  if (steps > cfg.max_steps)
    throw SolverError("solver: " + std::to_string(steps) + " steps requested, limit is " + std::to_string(cfg.max_steps));
  const double h = cfg.T_end / double(steps);
  detail::StageCache cache(&U, &F);
  auto N = [&](double t, const VectorField& w) {
    const auto& e = cache.at(t);
    VectorField r = advection_divergence(w, e.U ? &*e.U : nullptr);
    if (e.F) r += *e.F;
    r = leray_project(r);
    r *= -1.0;
    return r;
  };
  Trajectory tr;
  auto save = [&](double t, const VectorField& w) {
    tr.times.push_back(t);
    tr.states.push_back(w);
    if (F) tr.forcing_sup.push_back(sup_norm(*cache.at(t).F));
  };
  VectorField w = leray_project(w0);
  save(0.0, w);
  double ref = 0.0;
  for (long s = 0; s < steps; ++s) {
    const double t = s * h;
    double vmax = sup_norm(w);
    detail::check_finite(vmax, t);
    if (ref == 0.0 && vmax > 0.0) ref = vmax;
    if (ref > 0.0 && vmax > cfg.blowup_factor * ref)
      throw SolverError("solver: blow-up detected at t = " + fmt_double(t) + ", sup|w| = " + fmt_double(vmax) +
                        " exceeds " + fmt_double(cfg.blowup_factor) + " times its first value " + fmt_double(ref));
    const auto& e = cache.at(t);
    if (e.U) vmax += sup_norm(*e.U);
    if (vmax > 0.0 && h > cfg.cfl_safety * g.h() / vmax)
      throw SolverError("solver: CFL violated at t = " + fmt_double(t) + ": dt = " + fmt_double(h) + " > " +
                        fmt_double(cfg.cfl_safety * g.h() / vmax));
    w = lawson_rk4_step(w, t, h, N);
    if ((s + 1) % cfg.save_every == 0 || s + 1 == steps) save((s + 1) * h, w);
  }
  return tr;
}

// Unforced NS from u0.
inline Trajectory solve_ns(const VectorField& u0, const SolverConfig& cfg) { return evolve_ns(u0, {}, {}, cfg); }

// Chemin-Lerner norm L~^r_T B^s_{p,q} over the saved samples.
template <class F>
double trajectory_norm(const TrajectoryT<F>& tr, double r, double s, double p, double q) {
  tr.check_uniform(8, "trajectory_norm");
  const double t0 = tr.times.front(), h = tr.dt();
  ComponentsAt at = [&](double t) { return components(tr.states.at(std::size_t(std::llround((t - t0) / h)))); };
  return chemin_lerner_norm(at, t0, tr.times.back(), int(tr.size()), r, s, p, q);
}

struct FnsInputs {
  VectorAt coupling;  // u_{m-2} + w^(p)_m + w^(s)_m
  VectorAt forcing;   // F_m
};

struct FnsPreflight {
  double dt = 0.0;        // min(requested dt, CFL bound at t = 0)
  double cfl_dt = 0.0;
  long steps = 0;
  long forcing_evaluations = 0;
  double coupling_sup = 0.0;
  bool feasible = false;
  std::string reason;
};

// Step count the corrector run would need, from the coupling size at t = 0.
// Deterministic: no timing enters the decision.
inline FnsPreflight preflight_fns(Grid g, const FnsInputs& in, const SolverConfig& cfg) {
  cfg.validate();
  FnsPreflight p;
  p.coupling_sup = in.coupling ? sup_norm(in.coupling(0.0)) : 0.0;
  p.cfl_dt = p.coupling_sup > 0 ? cfg.cfl_safety * g.h() / p.coupling_sup : cfg.dt;
  p.dt = std::min(cfg.dt, p.cfl_dt);
  p.steps = long(std::ceil(cfg.T_end / p.dt - 1e-9));
  p.forcing_evaluations = 2 * p.steps;
  p.feasible = p.steps <= cfg.max_steps;
  if (!p.feasible)
    p.reason = "corrector run needs " + std::to_string(p.steps) + " steps (dt = " + fmt_double(p.dt) +
               " from sup|coupling| = " + fmt_double(p.coupling_sup) + " on n = " + std::to_string(g.n()) +
               "), above the limit of " + std::to_string(cfg.max_steps);
  return p;
}

struct FnsResult {
  Trajectory trajectory;
  FnsPreflight preflight;
  double cl_inf_bm12 = 0.0;  // ||w^(ns)||_{L~^inf B^{-1/2}_{inf,1}}
  double l1_b32 = 0.0;       // ||w^(ns)||_{L^1 B^{3/2}_{inf,1}}
};

// Forced corrector system with zero initial datum.
inline FnsResult solve_forced_ns(Grid g, const FnsInputs& in, SolverConfig cfg) {
  FnsResult r;
  r.preflight = preflight_fns(g, in, cfg);
  if (!r.preflight.feasible) throw SolverError("solve_forced_ns: infeasible: " + r.preflight.reason);
  cfg.dt = r.preflight.dt;
  r.trajectory = evolve_ns(VectorField(g), in.coupling, in.forcing, cfg);
  r.cl_inf_bm12 = trajectory_norm(r.trajectory, kInf, -0.5, kInf, 1.0);
  r.l1_b32 = trajectory_norm(r.trajectory, 1.0, 1.5, kInf, 1.0);
  return r;
}

// max over interior samples of |d_t u - Delta u + P(u.grad u) - P f|_inf,
// d_t by the centered 4th-order difference, divided by the largest
// |u|_{C^1} |u|_inf + |d_t u|_inf.
inline double ns_residual(const Trajectory& tr, const VectorAt& forcing = {}) {
  tr.check_uniform(5, "ns_residual");
  const double h = tr.dt();
  double res = 0.0, scale = 0.0;
  for (std::size_t i = 2; i + 2 < tr.size(); ++i) {
    const VectorField& u = tr.states[i];
    VectorField dt = tr.states[i - 2];
    dt.axpy(-8.0, tr.states[i - 1]);
    dt.axpy(8.0, tr.states[i + 1]);
    dt.axpy(-1.0, tr.states[i + 2]);
    dt *= 1.0 / (12 * h);
    VectorField nl = advection_divergence(u);
    if (forcing) nl -= forcing(tr.times[i]);
    VectorField r = dt - laplacian(u) + leray_project(nl);
    res = std::max(res, sup_norm(r));
    double us = sup_norm(u);
    double c1 = us + std::max(sup_norm(gradient(u[0])), sup_norm(gradient(u[1])));
    scale = std::max(scale, c1 * us + sup_norm(dt));
  }
  return scale > 0.0 ? res / scale : res;
}

// Energy balance E(T) - E(0) + 2 int |grad u|^2 over the saved samples,
// Simpson in time, relative to E(0) T. Needs an odd number of samples.
inline double energy_law_residual(const Trajectory& tr) {
  tr.check_uniform(3, "energy_law_residual");
  if (tr.size() % 2 == 0) throw SolverError("energy_law_residual: Simpson rule needs an odd sample count");
  auto l2sq = [](const VectorField& v) {
    double s = 0.0;
    for (int c = 0; c < 2; ++c)
      for (const auto& z : v[c].coeffs()) s += std::norm(z);
    return 4 * kPi * kPi * s;
  };
  std::vector<double> D;
  for (const auto& u : tr.states) {
    VectorField gx(partial(u[0], 0), partial(u[0], 1)), gy(partial(u[1], 0), partial(u[1], 1));
    D.push_back(l2sq(gx) + l2sq(gy));
  }
  double integral = 0.0;
  for (std::size_t i = 0; i < D.size(); ++i) integral += D[i] * (i == 0 || i + 1 == D.size() ? 1 : (i % 2 ? 4 : 2));
  integral *= tr.dt() / 3.0;
  const double E0 = l2sq(tr.states.front()), E1 = l2sq(tr.states.back());
  const double T = tr.times.back() - tr.times.front();
  return E0 > 0.0 ? std::abs(E1 - E0 + 2 * integral) / (E0 * T) : std::abs(E1 + 2 * integral);
}

struct TransportDiffusionResult {
  ScalarTrajectory trajectory;
  double lhs = 0.0;        // ||u||_{L~^inf_T B^{-1/2}_{inf,1}}
  double rhs = 0.0;        // e^{V(T)} (||u0||_{B^{-1/2}_{inf,1}} + ||g||_{L~^1_T B^{-1/2}_{inf,1}})
  double V = 0.0;          // int_0^T ||grad v||_inf
  double estimate_ratio = 0.0;
};

using ScalarAtTime = std::function<ScalarField(double)>;

// d_t u - Delta u + v.grad u = g for a solenoidal v.
inline TransportDiffusionResult transport_diffusion_solve(const VectorAt& v, const ScalarAtTime& g, const ScalarField& u0,
                                                          const SolverConfig& cfg) {
  cfg.validate();
  if (std::abs(u0.mean()) > mean_tolerance(u0)) throw SolverError("transport_diffusion: initial datum must have zero mean");
  const Grid gr = u0.grid();
  const long steps = cfg.steps();
  if (steps > cfg.max_steps) throw SolverError("transport_diffusion: too many steps");
  const double h = cfg.T_end / double(steps);
  auto check_v = [&](const VectorField& vv, double t) {
    double d = sup_norm(divergence(vv)), s = std::max(sup_norm(gradient(vv[0])), sup_norm(gradient(vv[1])));
    if (d > 1e-10 * std::max(s, 1.0))
      throw SolverError("transport_diffusion: velocity is not divergence free at t = " + fmt_double(t) + " (|div v| = " +
                        fmt_double(d) + ")");
    return s;
  };
  auto N = [&](double t, const ScalarField& u) {
    ScalarField r = g ? g(t) : ScalarField(gr, u.is_real());
    if (v) {
      VectorField vv = v(t);
      ScalarField adv = spectral_product(vv[0], partial(u, 0));
      adv += spectral_product(vv[1], partial(u, 1));
      r -= adv;
    }
    return r;
  };
  TransportDiffusionResult res;
  ScalarField u = u0;
  std::vector<double> gradv;
  auto save = [&](double t, const ScalarField& x) {
    res.trajectory.times.push_back(t);
    res.trajectory.states.push_back(x);
    gradv.push_back(v ? check_v(v(t), t) : 0.0);
  };
  save(0.0, u);
  for (long s = 0; s < steps; ++s) {
    const double t = s * h;
    u = lawson_rk4_step(u, t, h, N);
    detail::check_finite(u.max_abs_coeff(), t + h);
    if ((s + 1) % cfg.save_every == 0 || s + 1 == steps) save((s + 1) * h, u);
  }
  const auto& tr = res.trajectory;
  res.V = time_lr(gradv, tr.dt(), 1.0);
  if (tr.size() >= 8) {
    res.lhs = trajectory_norm(tr, kInf, -0.5, kInf, 1.0);
    double gnorm = 0.0;
    if (g) {
      ComponentsAt ga = [&](double t) { return components(g(t)); };
      gnorm = chemin_lerner_norm(ga, 0.0, tr.times.back(), int(tr.size()), 1.0, -0.5, kInf, 1.0);
    }
    res.rhs = std::exp(res.V) * (besov_norm(u0, -0.5, kInf, 1.0) + gnorm);
    res.estimate_ratio = res.rhs > 0 ? res.lhs / res.rhs : 0.0;
  }
  return res;
}

}  // namespace nsbmo
