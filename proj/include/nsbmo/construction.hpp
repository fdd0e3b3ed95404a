#pragma once
// Level construction: parameter schedule, concentration profile, cutoffs,
// space-time mollifiers, amplitudes, the flows w^(p), w^(s) and the error
// terms F^(1), F^(2) with the pressure P^(1).

#include <Eigen/Eigenvalues>
#include <boost/math/special_functions/legendre.hpp>
#include <cmath>
#include <functional>
#include <memory>
#include <optional>
#include <unordered_map>

#include "nsbmo/function_spaces.hpp"
#include "nsbmo/geometry.hpp"

namespace nsbmo {

class ConstructionError : public std::runtime_error {
 public:
  using std::runtime_error::runtime_error;
};
class ScheduleError : public std::runtime_error {
 public:
  using std::runtime_error::runtime_error;
};

inline std::string fmt_double(double x) {
  char buf[32];
  std::snprintf(buf, sizeof buf, "%.6g", x);
  return buf;
}

// ---------------------------------------------------------------------------
// Quadrature

namespace quad {

struct Rule {
  std::vector<double> x, w;
};

inline Rule gauss_legendre(int n, double a, double b) {
  if (n < 1) throw std::invalid_argument("gauss_legendre: n < 1");
  std::vector<double> z = boost::math::legendre_p_zeros<double>(n);
  std::vector<std::pair<double, double>> nodes;
  for (double x : z) {
    double d = boost::math::legendre_p_prime<double>(n, x);
    double w = 2.0 / ((1.0 - x * x) * d * d);
    nodes.emplace_back(x, w);
    if (x != 0.0) nodes.emplace_back(-x, w);
  }
  std::sort(nodes.begin(), nodes.end());
  Rule r;
  const double c = 0.5 * (a + b), h = 0.5 * (b - a);
  for (auto& [x, w] : nodes) {
    r.x.push_back(c + h * x);
    r.w.push_back(h * w);
  }
  return r;
}

}  // namespace quad

// ---------------------------------------------------------------------------
// Mollifiers

// Time kernel: bump exp(-1/(1-y^2)) supported in a window of length l that
// lies in the future of t, so Mol f(t) = sum_i W_i f(t + l sigma_i) with
// sigma_i in (0, 1). The nodes are the Gauss rule for the bump weight itself,
// built by the discretized Stieltjes procedure and Golub-Welsch.
class TimeMollifier {
 public:
  static const TimeMollifier& get() {
    static const TimeMollifier t(8);
    return t;
  }
  explicit TimeMollifier(int nodes) {
    const int N = 20000;
    std::vector<double> y(N), om(N);
    for (int j = 0; j < N; ++j) {
      y[j] = -1.0 + (j + 0.5) * 2.0 / N;
      om[j] = bump(y[j]) * 2.0 / N;
    }
    std::vector<double> alpha(nodes), beta(nodes);
    std::vector<double> p0(N, 0.0), p1(N, 1.0);
    double prev_norm = 0.0;
    for (int k = 0; k < nodes; ++k) {
      double nrm = 0.0, xm = 0.0;
      for (int j = 0; j < N; ++j) {
        nrm += om[j] * p1[j] * p1[j];
        xm += om[j] * y[j] * p1[j] * p1[j];
      }
      alpha[k] = xm / nrm;
      beta[k] = k == 0 ? nrm : nrm / prev_norm;
      prev_norm = nrm;
      for (int j = 0; j < N; ++j) {
        double p2 = (y[j] - alpha[k]) * p1[j] - (k == 0 ? 0.0 : beta[k] * p0[j]);
        p0[j] = p1[j];
        p1[j] = p2;
      }
    }
    Eigen::MatrixXd J = Eigen::MatrixXd::Zero(nodes, nodes);
    for (int k = 0; k < nodes; ++k) {
      J(k, k) = alpha[k];
      if (k + 1 < nodes) J(k, k + 1) = J(k + 1, k) = std::sqrt(beta[k + 1]);
    }
    Eigen::SelfAdjointEigenSolver<Eigen::MatrixXd> es(J);
    for (int k = 0; k < nodes; ++k) {
      sigma_.push_back(0.5 * (es.eigenvalues()(k) + 1.0));
      double v = es.eigenvectors()(0, k);
      weight_.push_back(v * v);
    }
  }
  static double bump(double y) { return std::abs(y) < 1.0 ? std::exp(-1.0 / (1.0 - y * y)) : 0.0; }
  const std::vector<double>& sigma() const { return sigma_; }
  const std::vector<double>& weight() const { return weight_; }

 private:
  std::vector<double> sigma_, weight_;
};

// Space kernel: radial bump psi(x) ~ exp(-1/(1-|x|^2)) with unit mass.
// hat(rho) is its Fourier transform at |xi| = rho via the Hankel integral.
class SpaceMollifier {
 public:
  static const SpaceMollifier& get() {
    static const SpaceMollifier s;
    return s;
  }
  SpaceMollifier() : r_(quad::gauss_legendre(400, 0.0, 1.0)) {
    for (std::size_t i = 0; i < r_.x.size(); ++i) mass_ += r_.w[i] * r_.x[i] * TimeMollifier::bump(r_.x[i]);
  }
  double hat(double rho) const {
    if (rho == 0.0) return 1.0;
    double s = 0.0;
    for (std::size_t i = 0; i < r_.x.size(); ++i)
      s += r_.w[i] * r_.x[i] * TimeMollifier::bump(r_.x[i]) * std::cyl_bessel_j(0.0, rho * r_.x[i]);
    return s / mass_;
  }

 private:
  quad::Rule r_;
  double mass_ = 0.0;
};

// Multiply by psi_hat(l xi).
inline ScalarField space_mollify(const ScalarField& f, double ell) {
  const auto& S = SpaceMollifier::get();
  std::unordered_map<long, double> cache;
  ScalarField out = f;
  const Grid& g = f.grid();
  const int n = g.n();
  for (int i = 0; i < n; ++i)
    for (int j = 0; j < n; ++j) {
      std::size_t idx = std::size_t(i) * n + j;
      if (out[idx] == cplx(0.0)) continue;
      long k1 = g.wavenumber(i), k2 = g.wavenumber(j);
      long q = k1 * k1 + k2 * k2;
      auto it = cache.find(q);
      if (it == cache.end()) it = cache.emplace(q, S.hat(ell * std::sqrt(double(q)))).first;
      out[idx] *= it->second;
    }
  return out;
}

using ScalarAt = std::function<ScalarField(double)>;

inline ScalarField mollify_spacetime(const ScalarAt& f, double ell, double t) {
  if (t < 0.0) throw ConstructionError("mollify_spacetime: negative time " + fmt_double(t));
  if (!(ell > 0.0)) throw ConstructionError("mollify_spacetime: scale must be positive");
  const auto& T = TimeMollifier::get();
  ScalarField acc;
  for (std::size_t i = 0; i < T.sigma().size(); ++i) {
    ScalarField v = f(t + ell * T.sigma()[i]);
    if (i == 0) {
      acc = v;
      acc *= T.weight()[i];
    } else {
      acc.axpy(T.weight()[i], v);
    }
  }
  return space_mollify(acc, ell);
}

// ---------------------------------------------------------------------------
// Parameter schedule

struct ParamSchedule {
  int n_lambda = DirectionSet::kDenominatorLcm;
  std::int64_t a = 0, b = 0;  // strict-formula parameters; zero when lambdas are listed
  double ell_exp = 2.0;
  double c0_floor = 1000.0;
  bool toy = true;
  std::vector<std::int64_t> lambdas;  // lambda(l) for l = 1..levels
  std::vector<std::int64_t> mus;

  int levels() const { return int(lambdas.size()); }
  std::int64_t lambda_int(int l) const { return at(lambdas, l, "lambda"); }
  double lambda(int l) const { return double(lambda_int(l)); }
  std::int64_t mu(int l) const { return at(mus, l, "mu"); }
  double ell(int l) const { return std::pow(lambda(l), -ell_exp); }

  static std::int64_t default_mu(std::int64_t lam, int N) {
    double r = std::pow(double(lam), 0.25);
    std::int64_t m = std::llround(r / N) * N;
    return std::max<std::int64_t>(m, N);
  }

  void validate() const {
    if (lambdas.empty()) throw ScheduleError("schedule has no levels");
    if (mus.size() != lambdas.size()) throw ScheduleError("schedule: mu list length differs from lambda list");
    for (int l = 1; l <= levels(); ++l) {
      if (lambda_int(l) % n_lambda != 0)
        throw ScheduleError("schedule: lambda(" + std::to_string(l) + ") = " + std::to_string(lambda_int(l)) +
                            " is not divisible by " + std::to_string(n_lambda));
      if (mu(l) <= 0 || mu(l) % n_lambda != 0)
        throw ScheduleError("schedule: mu(" + std::to_string(l) + ") = " + std::to_string(mu(l)) +
                            " is not a positive multiple of " + std::to_string(n_lambda));
      if (mu(l) > lambda_int(l)) throw ScheduleError("schedule: mu(" + std::to_string(l) + ") exceeds lambda");
      if (l > 1 && lambda_int(l) <= lambda_int(l - 1)) throw ScheduleError("schedule: lambda is not increasing");
    }
    if (!(ell_exp > 0.0)) throw ScheduleError("schedule: ell exponent must be positive");
  }

  // Default toy schedule: lambda = 25, 125, 625, ... and mu = 5.
  static ParamSchedule toy_default(int levels = 3) {
    ParamSchedule s;
    std::int64_t lam = 25;
    for (int l = 1; l <= levels; ++l, lam *= 5) {
      s.lambdas.push_back(lam);
      s.mus.push_back(5);
    }
    s.validate();
    return s;
  }

  // lambda(q) = N^4 a^(b^q). Only toy mode may materialize it.
  static ParamSchedule from_formula(int N, std::int64_t a, std::int64_t b, int levels, bool toy, double ell_exp) {
    const std::int64_t strict_min = std::int64_t(1) << 15;
    if (a < 2 || b < 2) throw ScheduleError("schedule: a and b must be integers >= 2");
    double digits1 = 4 * std::log10(double(N)) + double(b) * std::log10(double(a));
    if (!toy) {
      if (a >= strict_min && b >= strict_min)
        throw ScheduleError("strict schedule rejected: lambda(1) = N^4 a^b has about " + fmt_double(std::floor(digits1) + 1) +
                            " decimal digits and cannot be represented on any grid");
      throw ScheduleError("schedule with a < 2^15 or b < 2^15 requires toy mode");
    }
    ParamSchedule s;
    s.n_lambda = N;
    s.a = a;
    s.b = b;
    s.toy = true;
    s.ell_exp = ell_exp;
    for (int q = 1; q <= levels; ++q) {
      double digits = 4 * std::log10(double(N)) + std::pow(double(b), q) * std::log10(double(a));
      if (digits > 18)
        throw ScheduleError("schedule: lambda(" + std::to_string(q) + ") has about " + fmt_double(std::floor(digits) + 1) +
                            " digits, too large for a 64-bit frequency");
      std::int64_t lam = std::int64_t(N) * N * N * N;
      std::int64_t e = 1;
      for (int i = 0; i < q; ++i) e *= b;
      for (std::int64_t i = 0; i < e; ++i) lam *= a;
      s.lambdas.push_back(lam);
      s.mus.push_back(default_mu(lam, N));
    }
    s.validate();
    return s;
  }

  nlohmann::json to_json() const {
    return {{"n_lambda", n_lambda}, {"a", a}, {"b", b}, {"ell_exp", ell_exp}, {"c0_floor", c0_floor},
            {"toy", toy}, {"lambda", lambdas}, {"mu", mus}};
  }

 private:
  static std::int64_t at(const std::vector<std::int64_t>& v, int l, const char* what) {
    if (l < 1 || l > int(v.size()))
      throw ScheduleError(std::string("schedule: ") + what + "(" + std::to_string(l) + ") is not defined");
    return v[l - 1];
  }
};

// ---------------------------------------------------------------------------
// Concentration profile: indicator of [-hw/2, hw/2] smoothed by an
// exponential-of-semicircle kernel of half-width hw/2, so the support is
// [-hw, hw]. Normalized to int_T phi^2 = 1. The kernel shape parameter
// grows with the stored band; at 16384 the truncated series stays below
// 2e-13 outside the support, at 8192 it cannot get under ~6e-9.

class ConcentrationProfile {
 public:
  static double beta_for(int resolution) { return std::min(32.0, 20.0 * resolution / 8192.0); }

  static ConcentrationProfile build(int resolution = 16384, double half_width = 0.01) {
    if (resolution < 4096) throw ConstructionError("build_profile_phi: resolution must be at least 4096");
    if (!(half_width > 0.0) || half_width >= kPi)
      throw ConstructionError("build_profile_phi: half width must lie in (0, pi)");
    ConcentrationProfile p;
    p.res_ = resolution;
    p.beta_ = beta_for(resolution);
    p.hw_ = half_width;
    p.a_ = 0.5 * half_width;
    p.delta_ = 0.5 * half_width;
    p.theta_ = quad::gauss_legendre(600, -0.5 * kPi, 0.5 * kPi);
    p.cell_ = quad::gauss_legendre(64, -1.0, 1.0);
    p.mass_ = p.kernel_mass_raw(-p.delta_, p.delta_);
    const int M = resolution / 2;
    p.c_.resize(M);
    double e = 0.0;
    for (int m = 0; m < M; ++m) {
      double box = m == 0 ? 2 * p.a_ : 2 * std::sin(m * p.a_) / m;
      p.c_[m] = box * p.kernel_hat(m) / (2 * kPi);
      e += (m == 0 ? 1.0 : 2.0) * p.c_[m] * p.c_[m];
    }
    p.amp_ = 1.0 / std::sqrt(2 * kPi * e);
    for (double& c : p.c_) c *= p.amp_;
    return p;
  }

  int resolution() const { return res_; }
  double beta() const { return beta_; }
  double half_width() const { return hw_; }
  // c_m, m = 0 .. resolution/2 - 1 (c_{-m} = c_m)
  const std::vector<double>& coeffs() const { return c_; }

  // Exact value: zero for dist(s, 2 pi Z) >= half_width.
  double evaluate(double s) const {
    s = std::remainder(s, 2 * kPi);
    if (std::abs(s) >= hw_) return 0.0;
    return amp_ * kernel_mass_raw(s - a_, s + a_) / mass_;
  }
  // Truncated Fourier series of the stored coefficients.
  double evaluate_bandlimited(double s) const {
    double v = c_[0];
    for (std::size_t m = 1; m < c_.size(); ++m) v += 2 * c_[m] * std::cos(double(m) * s);
    return v;
  }
  // int_T phi^2 by Parseval over the stored band.
  double l2_squared() const {
    double e = 0.0;
    for (std::size_t m = 0; m < c_.size(); ++m) e += (m == 0 ? 1.0 : 2.0) * c_[m] * c_[m];
    return 2 * kPi * e;
  }

  // Profile used on the torus grid: sqrt(2 pi) c_m with a cos^2 taper over
  // M/2 < |m| <= M, renormalized to mean square one. Entry m = 0..M.
  std::vector<double> lifted(int M) const {
    if (M < 2 || M >= int(c_.size())) throw ConstructionError("lifted profile: mode count out of range");
    std::vector<double> v(M + 1);
    double e = 0.0;
    for (int m = 0; m <= M; ++m) {
      double x = double(m) / M;
      double tau = x <= 0.5 ? 1.0 : std::pow(std::cos(kPi * (x - 0.5)), 2);
      v[m] = std::sqrt(2 * kPi) * c_[m] * tau;
      e += (m == 0 ? 1.0 : 2.0) * v[m] * v[m];
    }
    for (double& x : v) x /= std::sqrt(e);
    return v;
  }

 private:
  double raw_kernel_theta(double th) const {
    return (std::exp(beta_ * (std::cos(th) - 1.0)) - std::exp(-beta_)) * delta_ * std::cos(th);
  }
  // Unnormalized kernel integrated over [x0, x1] intersected with its support.
  double kernel_mass_raw(double x0, double x1) const {
    x0 = std::max(x0, -delta_);
    x1 = std::min(x1, delta_);
    if (x1 <= x0) return 0.0;
    double t0 = std::asin(x0 / delta_), t1 = std::asin(x1 / delta_);
    double c = 0.5 * (t0 + t1), h = 0.5 * (t1 - t0), s = 0.0;
    for (std::size_t i = 0; i < cell_.x.size(); ++i) s += cell_.w[i] * raw_kernel_theta(c + h * cell_.x[i]);
    return s * h;
  }
  double kernel_hat(double omega) const {
    double s = 0.0;
    for (std::size_t i = 0; i < theta_.x.size(); ++i)
      s += theta_.w[i] * raw_kernel_theta(theta_.x[i]) * std::cos(omega * delta_ * std::sin(theta_.x[i]));
    return s / mass_;
  }

  int res_ = 0;
  double hw_ = 0, a_ = 0, delta_ = 0, mass_ = 1, amp_ = 1, beta_ = 20;
  quad::Rule theta_, cell_;
  std::vector<double> c_;
};

// ---------------------------------------------------------------------------
// Cutoffs. Distances are measured in the phase s = mu k.x, in which the
// Euclidean distance to the strip family of direction k is scaled by mu.

namespace intervals {

using Set = std::vector<std::pair<double, double>>;

inline Set normalize(Set s) {
  std::sort(s.begin(), s.end());
  Set out;
  for (auto& iv : s) {
    if (iv.second <= iv.first) continue;
    if (!out.empty() && iv.first <= out.back().second)
      out.back().second = std::max(out.back().second, iv.second);
    else
      out.push_back(iv);
  }
  return out;
}
// Add (c - h, c + h) reduced mod 2 pi into [0, 2 pi).
inline void add_periodic(Set& s, double c, double h) {
  const double P = 2 * kPi;
  if (2 * h >= P) {
    s.emplace_back(0.0, P);
    return;
  }
  c = c - P * std::floor(c / P);
  double lo = c - h, hi = c + h;
  if (lo < 0) {
    s.emplace_back(lo + P, P);
    s.emplace_back(0.0, hi);
  } else if (hi > P) {
    s.emplace_back(lo, P);
    s.emplace_back(0.0, hi - P);
  } else {
    s.emplace_back(lo, hi);
  }
}
inline Set intersect(const Set& a, const Set& b) {
  Set out;
  std::size_t i = 0, j = 0;
  while (i < a.size() && j < b.size()) {
    double lo = std::max(a[i].first, b[j].first), hi = std::min(a[i].second, b[j].second);
    if (hi > lo) out.emplace_back(lo, hi);
    if (a[i].second < b[j].second)
      ++i;
    else
      ++j;
  }
  return out;
}
inline double measure(const Set& s) {
  double m = 0.0;
  for (auto& iv : s) m += iv.second - iv.first;
  return m;
}

}  // namespace intervals

// Cutoff chi_top for the support sets of levels 1..top:
//   Omega       = cap_l cup_k {phase distance <= hw}
//   Omega tilde = cap_l cup_k {phase distance <  2 hw}      (d < 1/(100 mu))
//   mid set     = cap_l cup_k {phase distance <  3 hw / 2}  (d < 1/(200 mu))
// chi = 1_mid * psi_w with w = 1/(400 max mu).
class CutoffSystem {
 public:
  CutoffSystem(const ParamSchedule& S, int top, double profile_half_width = 0.01) : top_(top), hw_(profile_half_width) {
    if (top < 1 || top > S.levels()) throw ConstructionError("cutoffs: level " + std::to_string(top) + " is outside the schedule");
    for (int l = 1; l <= top; ++l) mu_.push_back(double(S.mu(l)));
    mu_max_ = *std::max_element(mu_.begin(), mu_.end());
    lambda_top_ = S.lambda(top);
  }

  int top() const { return top_; }
  double width() const { return 1.0 / (400.0 * mu_max_); }
  // The mollification width must span four grid cells.
  bool resolvable(const Grid& g) const { return width() >= 4 * g.h(); }
  int min_resolving_grid() const {
    int n = 16;
    while (width() < 4 * 2 * kPi / n) n *= 2;
    return n;
  }

  // Largest over levels of the smallest phase distance to the strips of that level.
  std::vector<double> phase_distances(double x1, double x2) const {
    DirectionSet L;
    std::vector<double> d;
    for (double mu : mu_) {
      double best = kPi;
      for (int p = 0; p < 3; ++p) {
        auto k = L.pair(p).k();
        double s = mu * (k[0] * x1 + k[1] * x2);
        best = std::min(best, std::abs(std::remainder(s, 2 * kPi)));
      }
      d.push_back(best);
    }
    return d;
  }
  bool in_omega(double x1, double x2) const { return worst(x1, x2) <= hw_; }
  bool in_omega_tilde(double x1, double x2) const { return worst(x1, x2) < 2 * hw_; }

  double chi(double x1, double x2) const {
    auto d = phase_distances(x1, x2);
    const double w = width(), mid = 1.5 * hw_;
    bool inside = true;
    for (std::size_t l = 0; l < d.size(); ++l) {
      if (d[l] - mu_[l] * w >= mid) return 0.0;
      if (d[l] + mu_[l] * w >= mid) inside = false;
    }
    if (inside) return 1.0;
    // Transition layer: polar quadrature of the bump over the disk of radius w.
    static const quad::Rule rr = quad::gauss_legendre(32, 0.0, 1.0);
    const int na = 64;
    double num = 0.0, den = 0.0;
    for (std::size_t i = 0; i < rr.x.size(); ++i) {
      double r = rr.x[i], wr = rr.w[i] * r * TimeMollifier::bump(r);
      for (int j = 0; j < na; ++j) {
        double th = 2 * kPi * (j + 0.5) / na;
        double y1 = x1 - w * r * std::cos(th), y2 = x2 - w * r * std::sin(th);
        den += wr;
        if (worst(y1, y2) < mid) num += wr;
      }
    }
    return num / den;
  }

  // Area fractions of Omega tilde and Omega: exact in x1 per row, midpoint in x2.
  double omega_tilde_fraction(int rows = 4096) const { return fraction(2 * hw_, rows); }
  double omega_fraction(int rows = 4096) const { return fraction(hw_, rows); }
  // Area fraction of the support of one building block phi(mu k.x).
  double block_support_fraction() const { return hw_ / kPi; }

  ScalarField field(Grid g) const {
    if (!resolvable(g))
      throw ConstructionError("cutoff width 1/(400 mu) = " + fmt_double(width()) + " is not resolved on an n = " +
                              std::to_string(g.n()) + " grid (needs n >= " + std::to_string(min_resolving_grid()) + ")");
    const int n = g.n();
    RVec v(g.size());
    for (int i = 0; i < n; ++i)
      for (int j = 0; j < n; ++j) v[std::size_t(i) * n + j] = chi(i * g.h(), j * g.h());
    return ScalarField::from_physical(g, v);
  }

  // Bounds ||chi||_{C^N} <= sum_{j<=N} w^{-j} max_{|s|=j} ||d^s psi||_{L^1}.
  std::vector<double> cn_bounds(int Nmax) const {
    Grid g(256);
    // unit-radius bump on [-pi, pi)^2
    RVec v(g.size());
    double mass = 0.0;
    for (int i = 0; i < 256; ++i)
      for (int j = 0; j < 256; ++j) {
        double x = std::remainder(i * g.h(), 2 * kPi), y = std::remainder(j * g.h(), 2 * kPi);
        double b = TimeMollifier::bump(std::hypot(x, y));
        v[std::size_t(i) * 256 + j] = b;
        mass += b * g.h() * g.h();
      }
    for (double& x : v) x /= mass;
    ScalarField psi = ScalarField::from_physical(g, v);
    std::vector<double> out;
    double total = 0.0;
    for (int N = 0; N <= Nmax; ++N) {
      double dmax = 0.0;
      for (int a1 = 0; a1 <= N; ++a1) {
        RVec p = mixed_partial(psi, a1, N - a1).to_physical();
        double l1 = 0.0;
        for (double x : p) l1 += std::abs(x) * g.h() * g.h();
        dmax = std::max(dmax, l1);
      }
      total += std::pow(width(), -N) * dmax;
      out.push_back(total);
    }
    return out;
  }
  double lambda_top() const { return lambda_top_; }

 private:
  double worst(double x1, double x2) const {
    auto d = phase_distances(x1, x2);
    return *std::max_element(d.begin(), d.end());
  }
  // Every direction has k1 != 0, so each row x2 = const meets each strip
  // family in exact x1 intervals.
  double fraction(double r, int rows) const {
    DirectionSet L;
    double total = 0.0;
    for (int row = 0; row < rows; ++row) {
      double x2 = 2 * kPi * (row + 0.5) / rows;
      intervals::Set acc{{0.0, 2 * kPi}};
      for (double mu : mu_) {
        intervals::Set lev;
        for (int p = 0; p < 3; ++p) {
          auto k = L.pair(p).k();
          // s = mu (k1 x1 + k2 x2) in 2 pi j + (-r, r)
          double slope = mu * k[0];
          int span = int(std::ceil(std::abs(slope))) + 2;
          int j0 = int(std::floor(mu * k[1] * x2 / (2 * kPi)));
          for (int j = j0 - span; j <= j0 + span; ++j)
            intervals::add_periodic(lev, (2 * kPi * j - mu * k[1] * x2) / slope, r / std::abs(slope));
        }
        acc = intervals::intersect(acc, intervals::normalize(lev));
      }
      total += intervals::measure(acc) / (2 * kPi);
    }
    return total / rows;
  }

  int top_;
  double hw_;
  std::vector<double> mu_;
  double mu_max_ = 0, lambda_top_ = 0;
};

// Cutoff chi_{2q-1}.
inline CutoffSystem build_cutoffs(const ParamSchedule& S, int q) { return CutoffSystem(S, 2 * q - 1); }

// ---------------------------------------------------------------------------
// Levels

// One level's w^(p) as a lazily evaluated time field, with its Calderon lift.
class Level {
 public:
  virtual ~Level() = default;
  virtual int index() const = 0;
  virtual const Grid& grid() const = 0;
  virtual double lambda() const = 0;
  virtual VectorField wp(double t) const = 0;
  virtual VectorField dwp_dt(double t) const = 0;
  virtual MatrixField Rwp(double t) const = 0;
  virtual MatrixField dRwp_dt(double t) const = 0;
  // sup_t ||R w^(p)(t)||_inf
  virtual double Rwp_sup() const = 0;
  // The seed is spread over the whole torus, so no support cutoff applies to it.
  virtual bool is_seed() const { return false; }
};

// w^(p)_1 = A lambda e^{-lambda^2 t} sin(lambda x1) e2. A = 0 gives the zero level.
class SeedLevel final : public Level {
 public:
  SeedLevel(Grid g, std::int64_t lambda1, double amplitude = 1.0) : g_(g), lam_(double(lambda1)), w0_(g), R0_(g) {
    if (2 * lambda1 >= g.n()) throw ConstructionError("seed frequency is not resolved on the grid");
    // sin(l x) = (e^{ilx} - e^{-ilx}) / 2i
    w0_[1].mode(int(lambda1), 0) = cplx(0.0, -0.5 * amplitude * lam_);
    w0_[1].mode(-int(lambda1), 0) = cplx(0.0, 0.5 * amplitude * lam_);
    R0_ = calderon_lift(w0_);
    rsup_ = sup_norm(R0_);
  }
  int index() const override { return 1; }
  const Grid& grid() const override { return g_; }
  double lambda() const override { return lam_; }
  VectorField wp(double t) const override { return std::exp(-lam_ * lam_ * t) * w0_; }
  VectorField dwp_dt(double t) const override { return (-lam_ * lam_ * std::exp(-lam_ * lam_ * t)) * w0_; }
  MatrixField Rwp(double t) const override {
    MatrixField R = R0_;
    R *= std::exp(-lam_ * lam_ * t);
    return R;
  }
  MatrixField dRwp_dt(double t) const override {
    MatrixField R = R0_;
    R *= -lam_ * lam_ * std::exp(-lam_ * lam_ * t);
    return R;
  }
  double Rwp_sup() const override { return rsup_; }
  bool is_seed() const override { return true; }

 private:
  Grid g_;
  double lam_;
  VectorField w0_;
  MatrixField R0_;
  double rsup_ = 0.0;
};

// Amplitude split into an exact constant and a fluctuation field. The
// matrix argument differs from Id by about 1e-6, so storing the sum in one
// double field would lose the low bits that w^(s) depends on.
struct SplitAmplitude {
  double base = 0.0;
  ScalarField fluct;
};

struct WpSplit {
  VectorField main, rem1, rem2, rem3;
};

struct F1Terms {
  VectorField F11, gap, osc, cross, dt_prev, support;
  ScalarField P11, P12;
  bool support_included = false;
  VectorField F() const {
    VectorField s = F11;
    s += gap;
    s += osc;
    s += cross;
    s += dt_prev;
    if (support_included) s += support;
    return s;
  }
  ScalarField P() const { return P11 + P12; }
};

struct F1Check {
  double t = 0.0;
  double residual = 0.0;  // sup of div(w w) + d_t w^(s) - F - grad P
  double scale = 0.0;     // largest term
  double relative = 0.0;
  std::vector<std::pair<std::string, double>> terms;
  std::string breakdown() const {
    std::string s;
    for (auto& [k, v] : terms) s += " " + k + "=" + fmt_double(v);
    return s;
  }
};

struct PerturbationOptions {
  int lift_modes = 48;
  double sqrt_truncation = 1e-16;  // relative cut for the band-limited square root
  double contract_tolerance = 1e-8;
};

// Level m >= 2 built from the previous level's w^(p):
//   a_(k,m) = (2000 C0)^{1/2} Mol[ a_k(Id + R w^(p)_{m-1} / (1000 C0)) ]
//   f_p     = a_(k,m) chi phi(mu k.x),  psi_s = sum_p 2 f_p cos(lambda k_p.x)
//   w^(p)   = lambda^{-2} e^{-lambda^2 t} Delta grad^perp psi_s
// which is the real field i times the complex sum of the defining formula.
class PerturbationLevel final : public Level {
 public:
  PerturbationLevel(int m, const ParamSchedule& S, std::shared_ptr<const Level> prev, const ConcentrationProfile& phi,
                    double C0, std::optional<ScalarField> chi = std::nullopt, PerturbationOptions opt = {})
      : m_(m), g_(prev->grid()), prev_(std::move(prev)), C0_(C0), chi_(std::move(chi)), opt_(opt) {
    if (m < 2) throw ConstructionError("perturbation level index must be at least 2");
    if (prev_->index() != m - 1) throw ConstructionError("previous level index mismatch");
    lam_ = S.lambda(m);
    mu_ = S.mu(m);
    ell_ = S.ell(m - 1);
    if (!chi_ && !prev_->is_seed())
      throw ConstructionError("level " + std::to_string(m) + " needs the cutoff chi_" + std::to_string(m - 1) +
                              " as a resolved field");
    DirectionSet L;
    for (int p = 0; p < 3; ++p) {
      Rational l(S.lambda_int(m));
      auto d = L.pair(p);
      K_[p] = {int((l * d.k1).num), int((l * d.k2).num)};
      kb_[p] = d.kbar();
      k_[p] = d.k();
      c0_[p] = L.weights(SymMatrix2::identity())[p];
      coef_[p] = {L.inverse()[p][0].value(), L.inverse()[p][1].value(), L.inverse()[p][2].value()};
    }
    auto lifted = phi.lifted(opt_.lift_modes);
    const int M = opt_.lift_modes;
    for (int p = 0; p < 3; ++p) {
      auto d = L.pair(p);
      int m1 = int((Rational(mu_) * d.k1).num), m2 = int((Rational(mu_) * d.k2).num);
      if (std::max(std::abs(m1), std::abs(m2)) * M >= g_.n() / 2)
        throw ConstructionError("concentration profile band is not resolved");
      phi_[p] = ScalarField(g_);
      for (int j = -M; j <= M; ++j) phi_[p].mode(j * m1, j * m2) = lifted[std::abs(j)];
    }
    if (chi_) {
      for (int p = 0; p < 3; ++p) phi_[p] = spectral_product(*chi_, phi_[p]);
      chi2_ = spectral_product(*chi_, *chi_);
    }
    // Resolution: quadratic interactions of the shifted blocks must stay below n/2.
    auto a0 = raw_amplitudes(0.0);
    int band_a = 0;
    for (auto& a : a0) band_a = std::max(band_a, a.fluct.band(1e-14));
    int band_phi = 0;
    for (auto& f : phi_) band_phi = std::max(band_phi, f.band(1e-14));
    int Kmax = 0;
    for (auto& K : K_) Kmax = std::max({Kmax, std::abs(K[0]), std::abs(K[1])});
    block_band_ = band_a + band_phi;
    if (2 * (Kmax + block_band_) >= g_.n() / 2)
      throw ConstructionError("level " + std::to_string(m) + " is not resolved: need 2 (lambda + block band) = " +
                              std::to_string(2 * (Kmax + block_band_)) + " < n/2 = " + std::to_string(g_.n() / 2));
    rsup_ = 0.0;
    for (double t : {0.0, 0.5 / (lam_ * lam_), 1.0 / (lam_ * lam_)}) rsup_ = std::max(rsup_, sup_norm(Rwp(t)));
  }

  int index() const override { return m_; }
  const Grid& grid() const override { return g_; }
  double lambda() const override { return lam_; }
  double mu() const { return double(mu_); }
  double ell() const { return ell_; }
  double C0() const { return C0_; }
  bool has_cutoff() const { return bool(chi_); }
  int block_band() const { return block_band_; }
  const ScalarField& profile_field(int p) const { return phi_[p]; }

  // Unmollified per-vector amplitude (2000 C0)^{1/2} a_k(Id + R/(1000 C0)) at time s.
  std::array<SplitAmplitude, 3> raw_amplitudes(double s) const { return sqrt_amplitudes(prev_->Rwp(s)); }

  // Mollified per-vector amplitude a_(k,m)(t).
  std::array<SplitAmplitude, 3> amplitudes(double t) const {
    if (t < 0.0) throw ConstructionError("amplitude: negative time");
    std::array<SplitAmplitude, 3> out;
    const auto& T = TimeMollifier::get();
    for (std::size_t i = 0; i < T.sigma().size(); ++i) {
      auto a = raw_amplitudes(t + ell_ * T.sigma()[i]);
      for (int p = 0; p < 3; ++p) {
        if (i == 0) {
          out[p].base = a[p].base;
          out[p].fluct = ScalarField(g_);
        }
        out[p].fluct.axpy(T.weight()[i], a[p].fluct);
      }
    }
    for (int p = 0; p < 3; ++p) out[p].fluct = space_mollify(out[p].fluct, ell_);
    return out;
  }
  // d/dt of the mollified amplitude.
  std::array<ScalarField, 3> amplitude_dt(double t) const {
    std::array<ScalarField, 3> out{ScalarField(g_), ScalarField(g_), ScalarField(g_)};
    const auto& T = TimeMollifier::get();
    for (std::size_t i = 0; i < T.sigma().size(); ++i) {
      double s = t + ell_ * T.sigma()[i];
      auto a = raw_amplitudes(s);
      auto dR = prev_->dRwp_dt(s);
      auto da = sqrt_amplitude_derivative(a, dR);
      for (int p = 0; p < 3; ++p) out[p].axpy(T.weight()[i], da[p]);
    }
    for (int p = 0; p < 3; ++p) out[p] = space_mollify(out[p], ell_);
    return out;
  }

  // f_p = a_p chi phi_p
  std::array<ScalarField, 3> blocks(double t) const {
    const Blocks& b = cached(t);
    return b.f;
  }

  VectorField wp(double t) const override { return wp_from(stream(cached(t).f), t); }
  VectorField dwp_dt(double t) const override {
    const Blocks& b = cached(t);
    std::array<ScalarField, 3> df;
    auto da = amplitude_dt(t);
    for (int p = 0; p < 3; ++p) df[p] = spectral_product(da[p], phi_[p]);
    VectorField w = wp_from(stream(b.f), t);
    w *= -lam_ * lam_;
    w += wp_from(stream(df), t);
    return w;
  }
  MatrixField Rwp(double t) const override { return R_from(stream(cached(t).f), t); }
  MatrixField dRwp_dt(double t) const override {
    auto da = amplitude_dt(t);
    std::array<ScalarField, 3> df;
    for (int p = 0; p < 3; ++p) df[p] = spectral_product(da[p], phi_[p]);
    MatrixField R = R_from(stream(cached(t).f), t);
    R *= -lam_ * lam_;
    R += R_from(stream(df), t);
    return R;
  }
  double Rwp_sup() const override { return rsup_; }

  // main = lambda e sum_k f_k (i kbar) E_k; the three remainders complete w^(p).
  WpSplit split(double t) const {
    const auto& f = cached(t).f;
    const double e = std::exp(-lam_ * lam_ * t);
    WpSplit s{VectorField(g_), VectorField(g_), VectorField(g_), VectorField(g_)};
    for (int p = 0; p < 3; ++p) {
      const int K1 = K_[p][0], K2 = K_[p][1];
      ScalarField lapf = laplacian(f[p]);
      ScalarField kgrad = k_[p][0] * partial(f[p], 0) + k_[p][1] * partial(f[p], 1);
      VectorField pg = perp_gradient(f[p]);
      for (int c = 0; c < 2; ++c) {
        cplx cm(0.0, lam_ * e * kb_[p][c]);
        add_shifted(s.main[c], cm, f[p], K1, K2);
        add_shifted(s.main[c], -cm, f[p], -K1, -K2);
        cplx c1(0.0, -e / lam_ * kb_[p][c]);
        add_shifted(s.rem1[c], c1, lapf, K1, K2);
        add_shifted(s.rem1[c], -c1, lapf, -K1, -K2);
        add_shifted(s.rem2[c], 2 * e * kb_[p][c], kgrad, K1, K2);
        add_shifted(s.rem2[c], 2 * e * kb_[p][c], kgrad, -K1, -K2);
        add_shifted(s.rem3[c], 1.0, pg[c], K1, K2);
        add_shifted(s.rem3[c], 1.0, pg[c], -K1, -K2);
      }
    }
    s.rem3 = laplacian(s.rem3);
    s.rem3 *= e / (lam_ * lam_);
    for (auto* v : {&s.main, &s.rem1, &s.rem2, &s.rem3}) enforce_real(*v);
    return s;
  }

  // w^(s) = w^(p)_{m-1} e^{-2 lambda^2 t}, valid when chi w^(p)_{m-1} = w^(p)_{m-1}.
  VectorField ws(double t) const {
    check_support(t);
    return std::exp(-2 * lam_ * lam_ * t) * prev_->wp(t);
  }
  VectorField dws_dt(double t) const {
    const double e = std::exp(-2 * lam_ * lam_ * t);
    VectorField v = prev_->dwp_dt(t);
    v.axpy(-2 * lam_ * lam_, prev_->wp(t));
    v *= e;
    return v;
  }
  // Tensor-divergence form: 1/2 chi^2 sum_k div(a_k^2(M) 2000 C0 kbar kbar) e^{-2 lambda^2 t}.
  // Only the fluctuation of a_k^2 carries a divergence.
  VectorField ws_raw(double t) const {
    auto g = sqrt_amplitudes(prev_->Rwp(t));
    MatrixField A(g_);
    for (int p = 0; p < 3; ++p) {
      // per pair: 2 vectors x a_k^2 = 2 (base + fluct)^2 / (2000 C0); keep 2 base fluct + fluct^2
      ScalarField sq = spectral_product(g[p].fluct, g[p].fluct);
      sq.axpy(2 * g[p].base, g[p].fluct);
      for (int a = 0; a < 2; ++a)
        for (int b = 0; b < 2; ++b) A(a, b).axpy(kb_[p][a] * kb_[p][b], sq);
    }
    // (base + fluct)^2 = 1000 C0 L_p(M), so 1/2 sum_k 2000 C0 a_k^2(M) kbar kbar = sum_p (base + fluct)^2 kbar kbar
    VectorField v = divergence(A);
    if (chi_) v = VectorField(spectral_product(chi2_, v[0]), spectral_product(chi2_, v[1]));
    v *= std::exp(-2 * lam_ * lam_ * t);
    return v;
  }

  // Sup of chi w^(p)_{m-1} - w^(p)_{m-1} relative to sup w^(p)_{m-1}.
  double support_violation(double t) const {
    if (!chi_) return 0.0;
    VectorField w = prev_->wp(t);
    double s = sup_norm(w);
    if (s == 0.0) return 0.0;
    VectorField cw(spectral_product(*chi_, w[0]), spectral_product(*chi_, w[1]));
    return sup_norm(cw - w) / s;
  }

  F1Terms assemble_F1_terms(double t) const {
    const Blocks& B = cached(t);
    const double lam2 = lam_ * lam_, ee = std::exp(-2 * lam2 * t);
    DirectionSet L;
    F1Terms T{VectorField(g_), VectorField(g_), VectorField(g_), VectorField(g_), VectorField(g_), VectorField(g_),
              ScalarField(g_), ScalarField(g_)};

    // Non-resonant part of div(main (x) main) = grad P11 + F11.
    std::array<Padded, 3> pf{Padded(B.f[0]), Padded(B.f[1]), Padded(B.f[2])};
    for (int p = 0; p < 3; ++p)
      for (int q = p; q < 3; ++q) {
        Padded prod = Padded::real_zeros(g_.n());
        accumulate_product(prod, 1.0, pf[p], pf[q]);
        ScalarField G = prod.truncate();
        VectorField dG = gradient(G);
        for (int u = 0; u < 6; ++u)
          for (int v = 0; v < 6; ++v) {
            if (!((u / 2 == p && v / 2 == q) || (u / 2 == q && v / 2 == p))) continue;
            if (u / 2 == v / 2 && u != v) continue;  // resonant: k_u + k_v = 0
            visit_pair(T, G, dG, u, v, lam2 * ee, L);
          }
      }
    enforce_real(T.P11);
    enforce_real(T.F11);

    // Resonant part: lambda^2 e^2 sum_p div(2000 C0 chi^2 phi_p^2 (Mol g_p)^2 kbar kbar), split.
    auto raw = raw_amplitudes(t);
    const auto& mol = B.a;
    // div(s kbar (x) kbar) = (kbar . grad s) kbar, accumulated per pair
    for (int p = 0; p < 3; ++p) {
      // per-vector amplitudes a = sqrt(1000 C0) g; 2 a^2 = 2000 C0 g^2 summed over +-k
      ScalarField phi2 = spectral_product(phi_[p], phi_[p]);  // includes chi^2 when chi is present
      {
        // (Mol a)^2 - a^2 = 2 base (mf - rf) + mf^2 - rf^2
        ScalarField d = mol[p].fluct - raw[p].fluct;
        ScalarField diff = spectral_product(d, mol[p].fluct + raw[p].fluct);
        diff.axpy(2 * raw[p].base, d);
        add_div_kk(T.gap, 2 * lam2 * ee, spectral_product(phi2, diff), p);
      }
      // chi^2 (a^2 - base^2): its divergence pairs with -2 lambda^2 e^2 w_prev
      ScalarField fl = spectral_product(raw[p].fluct, raw[p].fluct);
      fl.axpy(2 * raw[p].base, raw[p].fluct);
      {
        // a^2 (phi^2 - chi^2)
        ScalarField a2 = fl;
        a2.mode(0, 0) += raw[p].base * raw[p].base;
        if (chi_)
          phi2 -= chi2_;
        else
          phi2.mode(0, 0) -= 1.0;
        add_div_kk(T.osc, 2 * lam2 * ee, spectral_product(phi2, a2), p);
      }
      if (chi_) fl = spectral_product(chi2_, fl);
      add_div_kk(T.support, 2 * lam2 * ee, fl, p);
    }
    T.support.axpy(-2 * lam2 * ee, prev_->wp(t));
    T.support_included = bool(chi_);
    // 2000 C0 lambda^2 e^2 chi^2: the divergence of the constant part of M
    if (chi_) {
      T.P12 = chi2_;
      T.P12 *= 2000 * C0_ * lam2 * ee;
    } else {
      T.P12.mode(0, 0) = 2000 * C0_ * lam2 * ee;
    }

    // main (x) rem + rem (x) main + rem (x) rem
    {
      WpSplit s = split(t);
      VectorField rem = std::move(s.rem1);
      rem += s.rem2;
      s.rem2 = VectorField();
      rem += s.rem3;
      s.rem3 = VectorField();
      T.cross = divergence(sym_outer(s.main, rem, true));
    }
    T.dt_prev = ee * prev_->dwp_dt(t);
    return T;
  }

  // Assemble and verify div(w w) + d_t w^(s) = F^(1) + grad P^(1).
  std::pair<F1Terms, F1Check> assemble_F1(double t, bool throw_on_failure = true) const {
    F1Terms T = assemble_F1_terms(t);
    F1Check c;
    c.t = t;
    // r = div(w w) + d_t w^(s) - F - grad P, built one term at a time
    VectorField r;
    {
      VectorField w = wp(t);
      r = divergence(sym_outer(w, w, false));
    }
    c.terms.push_back({"div(w w)", sup_norm(r)});
    {
      VectorField dws = dws_dt(t);
      c.terms.push_back({"dt_ws", sup_norm(dws)});
      r += dws;
    }
    auto sub = [&](const char* name, const VectorField& v, bool include) {
      c.terms.push_back({name, sup_norm(v)});
      if (include) r -= v;
    };
    sub("F11", T.F11, true);
    sub("gradP11", gradient(T.P11), true);
    sub("gap", T.gap, true);
    sub("osc", T.osc, true);
    sub("cross", T.cross, true);
    sub("dt_prev", T.dt_prev, true);
    sub("support", T.support, T.support_included);
    sub("gradP12", gradient(T.P12), true);
    for (auto& [k, v] : c.terms) c.scale = std::max(c.scale, v);
    c.residual = sup_norm(r);
    c.relative = c.scale > 0 ? c.residual / c.scale : c.residual;
    if (throw_on_failure && c.relative > opt_.contract_tolerance)
      throw ConstructionError("F1 assembly at t = " + fmt_double(t) + ": residual " + fmt_double(c.relative) +
                              " relative; terms:" + c.breakdown());
    return {std::move(T), c};
  }

  // F^(2) = (d_t - Delta) w^(p) - Delta w^(s) + div(w^(p) (x) (w^(s) + u) + (w^(s) + u) (x) w^(p)
  //         + w^(s) (x) u + u (x) w^(s) + w^(s) (x) w^(s)),  u = u_{m-2}(t).
  VectorField assemble_F2(double t, const VectorField* u = nullptr) const {
    VectorField w = wp(t);
    VectorField F = dwp_dt(t) - laplacian(w);
    VectorField s = ws(t);
    F -= laplacian(s);
    // (w + s + u)(x)(w + s + u) - w (x) w - u (x) u
    VectorField all = w + s;
    if (u) all += *u;
    MatrixField B = sym_outer(all, all, false);
    B -= sym_outer(w, w, false);
    if (u) B -= sym_outer(*u, *u, false);
    F += divergence(B);
    return F;
  }

  // Sup-norm mismatch of w^(s)(0) against w^(p)_{m-1}(0), relative.
  double initial_mismatch() const {
    VectorField a = ws(0.0), b = prev_->wp(0.0);
    double s = sup_norm(b);
    return s == 0.0 ? sup_norm(a) : sup_norm(a - b) / s;
  }

  const Level& previous() const { return *prev_; }

 private:
  struct Blocks {
    double t = -1.0;
    std::array<SplitAmplitude, 3> a;
    std::array<ScalarField, 3> f;
  };

  const Blocks& cached(double t) const {
    if (cache_.t != t) {
      cache_.a = amplitudes(t);
      for (int p = 0; p < 3; ++p) {
        cache_.f[p] = spectral_product(cache_.a[p].fluct, phi_[p]);
        cache_.f[p].axpy(cache_.a[p].base, phi_[p]);
      }
      cache_.t = t;
    }
    return cache_;
  }

  std::array<SplitAmplitude, 3> sqrt_amplitudes(const MatrixField& R) const {
    const RVec r11 = R(0, 0).to_physical(), r12 = R(0, 1).to_physical(), r22 = R(1, 1).to_physical();
    const double s = 1000.0 * C0_, amp = std::sqrt(1000.0 * C0_);
    double worst = 0.0;
    std::array<RVec, 3> fl;
    for (auto& v : fl) v.resize(r11.size());
    for (std::size_t i = 0; i < r11.size(); ++i) {
      double a = r11[i] / s, b = r12[i] / s, c = r22[i] / s;
      worst = std::max(worst, std::sqrt(a * a + 2 * b * b + c * c));
      for (int p = 0; p < 3; ++p) {
        double dc = coef_[p][0] * a + coef_[p][1] * b + coef_[p][2] * c;
        double cp = c0_[p] + dc;
        if (!(cp > 0.0)) throw ConstructionError("amplitude: nonpositive weight; raise C0");
        fl[p][i] = amp * dc / (std::sqrt(cp) + std::sqrt(c0_[p]));
      }
    }
    if (worst > kDecompositionRadius)
      throw ConstructionError("amplitude: |R w^(p)_" + std::to_string(m_ - 1) + "|/(1000 C0) = " + fmt_double(worst) +
                              " leaves the 1e-3 ball; raise C0 to at least " + fmt_double(C0_ * worst / kDecompositionRadius));
    std::array<SplitAmplitude, 3> out;
    for (int p = 0; p < 3; ++p) {
      out[p].base = amp * std::sqrt(c0_[p]);
      out[p].fluct = truncate_small(ScalarField::from_physical(g_, fl[p]));
    }
    return out;
  }

  // d/ds sqrt-amplitude = amp * L_p(dR/(1000 C0)) / (2 g)
  std::array<ScalarField, 3> sqrt_amplitude_derivative(const std::array<SplitAmplitude, 3>& a, const MatrixField& dR) const {
    const RVec d11 = dR(0, 0).to_physical(), d12 = dR(0, 1).to_physical(), d22 = dR(1, 1).to_physical();
    const double s = 1000.0 * C0_, amp = std::sqrt(1000.0 * C0_);
    std::array<ScalarField, 3> out;
    for (int p = 0; p < 3; ++p) {
      RVec g = a[p].fluct.to_physical();
      RVec v(g.size());
      for (std::size_t i = 0; i < g.size(); ++i) {
        double dc = (coef_[p][0] * d11[i] + coef_[p][1] * d12[i] + coef_[p][2] * d22[i]) / s;
        v[i] = amp * amp * dc / (2 * (a[p].base + g[i]));
      }
      out[p] = truncate_small(ScalarField::from_physical(g_, v));
    }
    return out;
  }

  ScalarField truncate_small(ScalarField f) const {
    const double cut = opt_.sqrt_truncation * f.max_abs_coeff();
    for (auto& z : f.coeffs())
      if (std::abs(z) <= cut) z = 0.0;
    return f;
  }

  ScalarField stream(const std::array<ScalarField, 3>& f) const {
    ScalarField psi(g_);
    for (int p = 0; p < 3; ++p) {
      add_shifted(psi, 1.0, f[p], K_[p][0], K_[p][1]);
      add_shifted(psi, 1.0, f[p], -K_[p][0], -K_[p][1]);
    }
    return enforce_real(psi);
  }
  VectorField wp_from(const ScalarField& psi, double t) const {
    VectorField w = laplacian(perp_gradient(psi));
    w *= std::exp(-lam_ * lam_ * t) / (lam_ * lam_);
    return w;
  }
  MatrixField R_from(const ScalarField& psi, double t) const {
    VectorField v = perp_gradient(psi);
    MatrixField R(g_);
    for (int i = 0; i < 2; ++i)
      for (int j = 0; j < 2; ++j) R(i, j) = partial(v[j], i) + partial(v[i], j);
    R *= std::exp(-lam_ * lam_ * t) / (lam_ * lam_);
    return R;
  }

  void add_div_kk(VectorField& out, double c, const ScalarField& sc, int p) const {
    ScalarField d = partial(sc, 0);
    d *= kb_[p][0];
    d.axpy(kb_[p][1], partial(sc, 1));
    for (int b = 0; b < 2; ++b)
      if (kb_[p][b] != 0.0) out[b].axpy(c * kb_[p][b], d);
  }

  void visit_pair(F1Terms& T, const ScalarField& G, const VectorField& dG, int u, int v, double c, const DirectionSet& L) const {
    auto du = L.vector(u), dv = L.vector(v);
    auto ku = du.kbar(), kv = dv.kbar();
    int K1 = int((Rational(std::int64_t(lam_)) * (du.k1 + dv.k1)).num);
    int K2 = int((Rational(std::int64_t(lam_)) * (du.k2 + dv.k2)).num);
    double dot = ku[0] * kv[0] + ku[1] * kv[1];
    add_shifted(T.P11, 0.5 * c * (1.0 - dot), G, K1, K2);
    for (int j = 0; j < 2; ++j) {
      // 1/2 (kbar_u . kbar_v - 1) d_j G - (kbar_u . grad G) kbar_v,j
      add_shifted(T.F11[j], 0.5 * c * (dot - 1.0), dG[j], K1, K2);
      add_shifted(T.F11[j], -c * ku[0] * kv[j], dG[0], K1, K2);
      add_shifted(T.F11[j], -c * ku[1] * kv[j], dG[1], K1, K2);
    }
  }

  // a (x) b + b (x) a (mixed = true) or a (x) a (mixed = false), dealiased.
  MatrixField sym_outer(const VectorField& a, const VectorField& b, bool mixed) const {
    std::array<Padded, 2> pa{Padded(a[0]), Padded(a[1])};
    MatrixField M(g_);
    if (!mixed) {
      for (int i = 0; i < 2; ++i)
        for (int j = i; j < 2; ++j) {
          Padded o = Padded::real_zeros(g_.n());
          accumulate_product(o, 1.0, pa[i], pa[j]);
          M(i, j) = o.truncate();
          if (i != j) M(j, i) = M(i, j);
        }
      return M;
    }
    // a b^T + b a^T + b b^T
    std::array<Padded, 2> pb{Padded(b[0]), Padded(b[1])};
    for (int i = 0; i < 2; ++i)
      for (int j = i; j < 2; ++j) {
        Padded o = Padded::real_zeros(g_.n());
        accumulate_product(o, 1.0, pa[i], pb[j]);
        accumulate_product(o, 1.0, pb[i], pa[j]);
        accumulate_product(o, 1.0, pb[i], pb[j]);
        M(i, j) = o.truncate();
        if (i != j) M(j, i) = M(i, j);
      }
    return M;
  }

  void check_support(double t) const {
    if (!chi_) return;
    double v = support_violation(t);
    if (v > 1e-9)
      throw ConstructionError("construction consistency: chi_" + std::to_string(m_ - 1) + " w^(p)_" + std::to_string(m_ - 1) +
                              " differs from w^(p)_" + std::to_string(m_ - 1) + " by " + fmt_double(v) + " relative");
  }

  int m_;
  Grid g_;
  std::shared_ptr<const Level> prev_;
  double C0_;
  std::optional<ScalarField> chi_;
  ScalarField chi2_;
  PerturbationOptions opt_;
  double lam_ = 0, ell_ = 0;
  std::int64_t mu_ = 0;
  std::array<std::array<int, 2>, 3> K_{};
  std::array<std::array<double, 2>, 3> kb_{}, k_{};
  std::array<double, 3> c0_{};
  std::array<std::array<double, 3>, 3> coef_{};
  std::array<ScalarField, 3> phi_;
  int block_band_ = 0;
  double rsup_ = 0.0;
  mutable Blocks cache_;
};

// C0 = max(floor, 10 sup_t ||R w^(p)_{m-1}||_inf)
inline double select_C0(const ParamSchedule& S, const Level& prev) { return std::max(S.c0_floor, 10.0 * prev.Rwp_sup()); }

// (d_t - Delta)(e^{-lambda^2 t} e^{i lambda k.x}) for the six directions,
// with d_t analytic and by a 4th-order difference. Returns the largest
// relative residual of each.
struct HeatModeCheck {
  double analytic = 0.0, finite_difference = 0.0;
};
inline HeatModeCheck heat_mode_check(Grid g, std::int64_t lambda, double t) {
  DirectionSet L;
  HeatModeCheck r;
  const double lam = double(lambda);
  for (int v = 0; v < 6; ++v) {
    auto d = L.vector(v);
    Rational l(lambda);
    int K1 = int((l * d.k1).num), K2 = int((l * d.k2).num);
    if ((l * d.k1).den != 1 || (l * d.k2).den != 1) throw ConstructionError("heat mode: lambda k is not integer");
    auto mode = [&](double s) {
      ScalarField f(g, false);
      f.mode(K1, K2) = std::exp(-lam * lam * s);
      return f;
    };
    ScalarField f = mode(t);
    ScalarField dt = mode(t);
    dt *= -lam * lam;
    ScalarField res = dt - laplacian(f);
    double scale = lam * lam * std::abs(f.mode(K1, K2));
    r.analytic = std::max(r.analytic, res.max_abs_coeff() / scale);
    double h = 1e-3 / (lam * lam);
    ScalarField fd = mode(t - 2 * h);
    fd.axpy(-8.0, mode(t - h));
    fd.axpy(8.0, mode(t + h));
    fd.axpy(-1.0, mode(t + 2 * h));
    fd *= 1.0 / (12 * h);
    ScalarField res2 = fd - laplacian(f);
    r.finite_difference = std::max(r.finite_difference, res2.max_abs_coeff() / scale);
  }
  return r;
}

// Centered 4th-order difference of a vector time field.
inline VectorField fd4(const std::function<VectorField(double)>& f, double t, double h) {
  VectorField d = f(t - 2 * h);
  d.axpy(-8.0, f(t - h));
  d.axpy(8.0, f(t + h));
  d.axpy(-1.0, f(t + 2 * h));
  d *= 1.0 / (12 * h);
  return d;
}

}  // namespace nsbmo
