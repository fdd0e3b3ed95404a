#pragma once
// Littlewood-Paley blocks and the norms built on them: Besov,
// Chemin-Lerner, C^N, a Carleson-measure proxy for BMO^{-1}, and the
// oscillatory Besov estimate.

#include <functional>
#include <limits>
#include <string>
#include <vector>

#include "nsbmo/spectral.hpp"

namespace nsbmo {

class NormError : public std::runtime_error {
 public:
  using std::runtime_error::runtime_error;
};

inline constexpr double kInf = std::numeric_limits<double>::infinity();

// Components of a scalar or vector field; pointwise norms are Euclidean.
using Components = std::vector<ScalarField>;
inline Components components(const ScalarField& f) { return {f}; }
inline Components components(const VectorField& v) { return {v[0], v[1]}; }
inline Components components(const MatrixField& A) { return {A.c[0], A.c[1], A.c[2], A.c[3]}; }

// Smooth dyadic partition in log2|xi|. Block j >= 0 has plateau
// [j - 1/2 + a, j + 1/2 - a] and support [j - 1/2 - a, j + 1/2 + a] with a = 1/8.
// Block -1 is the mean: on the integer lattice no other frequency has |xi| < 1.
class LittlewoodPaley {
 public:
  static constexpr double kTransition = 0.125;

  static int j_max(int n) {
    int j = 0;
    while ((1 << j) < n) ++j;
    return j;
  }

  // Smooth step, 0 for x <= -a, 1 for x >= a.
  static double step(double x) {
    const double a = kTransition;
    if (x <= -a) return 0.0;
    if (x >= a) return 1.0;
    double y = x / a;
    double p = std::exp(-1.0 / (1.0 + y)), q = std::exp(-1.0 / (1.0 - y));
    return p / (p + q);
  }

  static double weight(int j, double rho) {
    if (j == -1) return rho == 0.0 ? 1.0 : 1.0 - step(std::log2(rho) + 0.5);
    if (rho == 0.0) return 0.0;
    double u = std::log2(rho);
    return step(u - (j - 0.5)) - step(u - (j + 0.5));
  }
};

inline ScalarField lp_block(const ScalarField& f, int j) {
  const int jm = LittlewoodPaley::j_max(f.n());
  if (j < -1 || j > jm)
    throw NormError("lp_block: block " + std::to_string(j) + " outside [-1, " + std::to_string(jm) + "]");
  return detail::apply_symbol(f, [j](int k1, int k2, bool, bool) {
    return cplx(LittlewoodPaley::weight(j, std::sqrt(double(k1 * k1 + k2 * k2))));
  });
}

inline Components lp_block(const Components& f, int j) {
  Components out;
  for (auto& c : f) out.push_back(lp_block(c, j));
  return out;
}

// L^p norm with Lebesgue measure on [0, 2pi)^2. p = inf samples the 3n/2
// grid; p = 2 uses Parseval; other p use the 3n/2 grid as a quadrature.
inline double lp_norm(const Components& f, double p) {
  if (f.empty()) return 0.0;
  if (!(p >= 1.0)) throw NormError("lp_norm: p must be >= 1");
  const double area = 4.0 * kPi * kPi;
  if (p == 2.0) {
    double s = 0.0;
    for (auto& c : f)
      for (auto& z : c.coeffs()) s += std::norm(z);
    return std::sqrt(area * s);
  }
  std::vector<Padded> pads;
  for (auto& c : f) pads.emplace_back(c);
  const std::size_t N = pads[0].size();
  double acc = 0.0;
  for (std::size_t i = 0; i < N; ++i) {
    double s = 0.0;
    for (auto& q : pads) s += std::norm(q.value(i));
    double a = std::sqrt(s);
    if (std::isinf(p))
      acc = std::max(acc, a);
    else
      acc += std::pow(a, p);
  }
  if (std::isinf(p)) return acc;
  return std::pow(area * acc / double(N), 1.0 / p);
}

inline double lq_sum(const std::vector<double>& terms, double q) {
  if (!(q >= 1.0)) throw NormError("q must be >= 1");
  double acc = 0.0;
  for (double t : terms) acc = std::isinf(q) ? std::max(acc, t) : acc + std::pow(t, q);
  return std::isinf(q) ? acc : std::pow(acc, 1.0 / q);
}

// ||Delta_j f||_{L^p} for j = -1..j_max.
inline std::vector<double> block_norms(const Components& f, double p) {
  const int jm = LittlewoodPaley::j_max(f.at(0).n());
  std::vector<double> out;
  for (int j = -1; j <= jm; ++j) out.push_back(lp_norm(lp_block(f, j), p));
  return out;
}

inline double besov_from_blocks(const std::vector<double>& bn, double s, double q) {
  std::vector<double> terms;
  for (std::size_t i = 0; i < bn.size(); ++i) terms.push_back(std::pow(2.0, s * (int(i) - 1)) * bn[i]);
  return lq_sum(terms, q);
}

// ||f||_{B^s_{p,q}} = || 2^{js} ||Delta_j f||_{L^p} ||_{l^q}
inline double besov_norm(const Components& f, double s, double p, double q) {
  return besov_from_blocks(block_norms(f, p), s, q);
}
inline double besov_norm(const ScalarField& f, double s, double p, double q) { return besov_norm(components(f), s, p, q); }
inline double besov_norm(const VectorField& f, double s, double p, double q) { return besov_norm(components(f), s, p, q); }

using ComponentsAt = std::function<Components(double)>;

inline std::vector<double> uniform_times(double t0, double t1, int count) {
  if (count < 2) throw NormError("uniform_times: need at least two samples");
  std::vector<double> t(count);
  for (int i = 0; i < count; ++i) t[i] = t0 + (t1 - t0) * i / double(count - 1);
  return t;
}

// Time L^r of sampled values on a uniform grid: trapezoid for finite r,
// max for r = inf.
inline double time_lr(const std::vector<double>& v, double dt, double r) {
  if (std::isinf(r)) {
    double m = 0.0;
    for (double x : v) m = std::max(m, x);
    return m;
  }
  double s = 0.0;
  for (std::size_t i = 0; i < v.size(); ++i) {
    double w = (i == 0 || i + 1 == v.size()) ? 0.5 : 1.0;
    s += w * std::pow(v[i], r);
  }
  return std::pow(s * dt, 1.0 / r);
}

// ||u||_{L~^r_T B^s_{p,q}}: time norm inside the dyadic sum.
inline double chemin_lerner_norm(const ComponentsAt& u, double t0, double t1, int samples, double r, double s,
                                 double p, double q) {
  if (samples < 8) throw NormError("chemin_lerner_norm: at least 8 time samples required");
  if (!(t1 > t0)) throw NormError("chemin_lerner_norm: empty time interval");
  auto times = uniform_times(t0, t1, samples);
  std::vector<std::vector<double>> per_block;
  for (double t : times) {
    auto bn = block_norms(u(t), p);
    if (per_block.empty()) per_block.resize(bn.size());
    for (std::size_t j = 0; j < bn.size(); ++j) per_block[j].push_back(bn[j]);
  }
  const double dt = (t1 - t0) / double(samples - 1);
  std::vector<double> bt;
  for (auto& v : per_block) bt.push_back(time_lr(v, dt, r));
  return besov_from_blocks(bt, s, q);
}

// C^N norm: sum over j <= N of the largest sup norm among derivatives of
// order j. The default takes the max over multi-indices; tensor mode uses the
// Euclidean norm of the full j-th derivative tensor.
enum class CnMode { multi_index, tensor };

inline ScalarField mixed_partial(const ScalarField& f, int a1, int a2) {
  ScalarField g = f;
  for (int i = 0; i < a1; ++i) g = partial(g, 0);
  for (int i = 0; i < a2; ++i) g = partial(g, 1);
  return g;
}

inline std::vector<double> cn_orders(const Components& f, int N, CnMode mode) {
  if (N < 0 || N > 4) throw NormError("cn_norm: order must be in 0..4");
  std::vector<double> out;
  for (int j = 0; j <= N; ++j) {
    if (mode == CnMode::multi_index) {
      double m = 0.0;
      for (int a = 0; a <= j; ++a) {
        Components d;
        for (auto& c : f) d.push_back(mixed_partial(c, a, j - a));
        m = std::max(m, lp_norm(d, kInf));
      }
      out.push_back(m);
    } else {
      // Every ordered index tuple; binomial multiplicity of each multi-index.
      Components d;
      for (int a = 0; a <= j; ++a) {
        double mult = std::tgamma(j + 1.0) / (std::tgamma(a + 1.0) * std::tgamma(j - a + 1.0));
        for (auto& c : f) {
          auto g = mixed_partial(c, a, j - a);
          g *= std::sqrt(mult);
          d.push_back(std::move(g));
        }
      }
      out.push_back(lp_norm(d, kInf));
    }
  }
  return out;
}

inline double cn_norm(const Components& f, int N, CnMode mode = CnMode::multi_index) {
  double s = 0.0;
  for (double v : cn_orders(f, N, mode)) s += v;
  return s;
}
inline double cn_norm(const ScalarField& f, int N, CnMode mode = CnMode::multi_index) {
  return cn_norm(components(f), N, mode);
}

// ||f||_{L^r_t C^N}: time norm of each derivative sup, then max over
// multi-indices and sum over orders.
inline double cn_time_norm(const ComponentsAt& f, double t0, double t1, int samples, int N, double r) {
  if (samples < 2) throw NormError("cn_time_norm: need samples");
  if (N < 0 || N > 4) throw NormError("cn_norm: order must be in 0..4");
  auto times = uniform_times(t0, t1, samples);
  std::vector<std::vector<std::vector<double>>> v(N + 1);
  for (int j = 0; j <= N; ++j) v[j].resize(j + 1);
  for (double t : times) {
    auto c = f(t);
    for (int j = 0; j <= N; ++j)
      for (int a = 0; a <= j; ++a) {
        Components d;
        for (auto& x : c) d.push_back(mixed_partial(x, a, j - a));
        v[j][a].push_back(lp_norm(d, kInf));
      }
  }
  const double dt = (t1 - t0) / double(samples - 1);
  double s = 0.0;
  for (int j = 0; j <= N; ++j) {
    double m = 0.0;
    for (int a = 0; a <= j; ++a) m = std::max(m, time_lr(v[j][a], dt, r));
    s += m;
  }
  return s;
}

// Carleson-measure proxy for BMO^{-1}:
//   sup_{x, r} ( r^{-2} int_0^{r^2} int_{B(x,r)} |e^{s Delta} f|^2 dy ds )^{1/2}
// over grid centres and radii 2^{-1} .. 2^{-floor(log2(n)/2)}, with 16
// log-spaced s-nodes on [1e-6 r^2, r^2] (trapezoid in log s).
inline double bmo_inv_norm(const Components& f) {
  if (f.empty()) return 0.0;
  const Grid g = f[0].grid();
  const int n = g.n();
  const double h = g.h();
  const int rmax = LittlewoodPaley::j_max(n) / 2;
  const int ns = 16;
  double best = 0.0;
  for (int e = 1; e <= rmax; ++e) {
    const double r = std::ldexp(1.0, -e);
    // Disk indicator centred at the origin, periodised.
    RVec disk(g.size(), 0.0);
    for (int i = 0; i < n; ++i)
      for (int j = 0; j < n; ++j) {
        double x = std::min(i, n - i) * h, y = std::min(j, n - j) * h;
        if (x * x + y * y <= r * r) disk[std::size_t(i) * n + j] = h * h;
      }
    ScalarField dhat = ScalarField::from_physical(g, disk);
    RVec acc(g.size(), 0.0);
    const double lo = std::log(1e-6 * r * r), hi = std::log(r * r);
    const double dl = (hi - lo) / (ns - 1);
    for (int k = 0; k < ns; ++k) {
      const double s = std::exp(lo + dl * k);
      const double w = ((k == 0 || k == ns - 1) ? 0.5 : 1.0) * dl * s;
      RVec dens(g.size(), 0.0);
      for (auto& c : f) {
        ScalarField hc = heat_semigroup(c, s);
        if (hc.is_real()) {
          RVec p = hc.to_physical();
          for (std::size_t i = 0; i < p.size(); ++i) dens[i] += p[i] * p[i];
        } else {
          CVec p = hc.to_physical_complex();
          for (std::size_t i = 0; i < p.size(); ++i) dens[i] += std::norm(p[i]);
        }
      }
      ScalarField dh = ScalarField::from_physical(g, dens);
      // Circular convolution: coefficient product times (2pi)^2 / h^2 grid factor.
      for (std::size_t i = 0; i < g.size(); ++i) dh[i] *= dhat[i] * double(g.size());
      RVec conv = dh.to_physical();
      for (std::size_t i = 0; i < g.size(); ++i) acc[i] += w * conv[i];
    }
    double m = 0.0;
    for (double a : acc) m = std::max(m, a);
    best = std::max(best, std::sqrt(std::max(0.0, m) / (r * r)));
  }
  return best;
}
inline double bmo_inv_norm(const VectorField& v) { return bmo_inv_norm(components(v)); }

struct OscillatoryCheck {
  double lhs = 0.0;
  double rhs = 0.0;
  double ratio = 0.0;
};

// sup_t ||f e^{i lambda k.x}||_{B^{-1}_{inf,inf}} against
// lambda^{-1} ||f||_{L^inf L^inf} + lambda^{-2} ||f||_{L^inf C^2}.
inline OscillatoryCheck oscillatory_bound_check(const std::vector<Components>& samples, double lambda, double k1,
                                                double k2) {
  if (samples.empty()) throw NormError("oscillatory_bound_check: no samples");
  const double K1d = lambda * k1, K2d = lambda * k2;
  const int K1 = int(std::lround(K1d)), K2 = int(std::lround(K2d));
  if (std::abs(K1 - K1d) > 1e-9 || std::abs(K2 - K2d) > 1e-9)
    throw NormError("oscillatory_bound_check: lambda k is not an integer frequency");
  const int n = samples[0].at(0).n();
  int b = 0;
  for (auto& s : samples)
    for (auto& c : s) b = std::max(b, c.band(1e-15));
  if (b + std::max(std::abs(K1), std::abs(K2)) >= n / 2)
    throw NormError("oscillatory_bound_check: modulated field is not resolved on the grid");
  OscillatoryCheck out;
  double linf = 0.0, c2 = 0.0;
  for (auto& s : samples) {
    Components mod;
    for (auto& c : s) mod.push_back(shift_modes(c, K1, K2));
    out.lhs = std::max(out.lhs, besov_norm(mod, -1.0, kInf, kInf));
    linf = std::max(linf, lp_norm(s, kInf));
    c2 = std::max(c2, cn_norm(s, 2));
  }
  out.rhs = linf / lambda + c2 / (lambda * lambda);
  out.ratio = out.rhs > 0.0 ? out.lhs / out.rhs : 0.0;
  return out;
}

}  // namespace nsbmo
