#pragma once
// The direction set Lambda, the geometric decomposition of symmetric
// matrices near the identity, and the stationary Mikado-type flow identity.

#include <array>
#include <cstdint>
#include <numeric>
#include <string>

#include "json.hpp"
#include "nsbmo/spectral.hpp"

namespace nsbmo {

class GeometryError : public std::runtime_error {
 public:
  using std::runtime_error::runtime_error;
};

struct Rational {
  std::int64_t num = 0, den = 1;
  Rational() = default;
  Rational(std::int64_t n, std::int64_t d = 1) : num(n), den(d) {
    if (d == 0) throw GeometryError("zero denominator");
    if (den < 0) num = -num, den = -den;
    std::int64_t g = std::gcd(num < 0 ? -num : num, den);
    if (g > 1) num /= g, den /= g;
  }
  double value() const { return double(num) / double(den); }
  friend Rational operator+(Rational a, Rational b) { return {a.num * b.den + b.num * a.den, a.den * b.den}; }
  friend Rational operator-(Rational a, Rational b) { return {a.num * b.den - b.num * a.den, a.den * b.den}; }
  friend Rational operator*(Rational a, Rational b) { return {a.num * b.num, a.den * b.den}; }
  friend Rational operator/(Rational a, Rational b) { return {a.num * b.den, a.den * b.num}; }
  friend Rational operator-(Rational a) { return {-a.num, a.den}; }
  bool operator==(const Rational& o) const { return num == o.num && den == o.den; }
};

struct Direction {
  Rational k1, k2;
  // kbar = k rotated by +90 degrees
  Rational kbar1() const { return -k2; }
  Rational kbar2() const { return k1; }
  std::array<double, 2> k() const { return {k1.value(), k2.value()}; }
  std::array<double, 2> kbar() const { return {kbar1().value(), kbar2().value()}; }
  Direction operator-() const { return {-k1, -k2}; }
};

struct SymMatrix2 {
  double a11 = 0, a12 = 0, a22 = 0;
  static SymMatrix2 identity() { return {1.0, 0.0, 1.0}; }
  double frobenius_distance(const SymMatrix2& o) const {
    double d11 = a11 - o.a11, d12 = a12 - o.a12, d22 = a22 - o.a22;
    return std::sqrt(d11 * d11 + 2 * d12 * d12 + d22 * d22);
  }
};

// Lambda = {+-(1,0), +-(3/5,4/5), +-(3/5,-4/5)}. Vector v of the list has
// pair index v/2 and sign (-1)^v; both members of a pair share kbar (x) kbar.
class DirectionSet {
 public:
  static constexpr int kPairs = 3;
  static constexpr int kVectors = 6;
  static constexpr int kDenominatorLcm = 5;

  DirectionSet() {
    pairs_ = {Direction{Rational(1), Rational(0)}, Direction{Rational(3, 5), Rational(4, 5)},
              Direction{Rational(3, 5), Rational(-4, 5)}};
    // Columns: (kbar1^2, kbar1 kbar2, kbar2^2) of each pair.
    std::array<std::array<Rational, 3>, 3> A;
    for (int p = 0; p < 3; ++p) {
      auto& d = pairs_[p];
      A[0][p] = d.kbar1() * d.kbar1();
      A[1][p] = d.kbar1() * d.kbar2();
      A[2][p] = d.kbar2() * d.kbar2();
    }
    // Closed-form cofactor inverse.
    auto cof = [&](int r, int c) {
      int r0 = (r + 1) % 3, r1 = (r + 2) % 3, c0 = (c + 1) % 3, c1 = (c + 2) % 3;
      return A[r0][c0] * A[r1][c1] - A[r0][c1] * A[r1][c0];
    };
    Rational det = A[0][0] * cof(0, 0) + A[0][1] * cof(0, 1) + A[0][2] * cof(0, 2);
    if (det.num == 0) throw GeometryError("direction set does not span symmetric matrices");
    for (int i = 0; i < 3; ++i)
      for (int j = 0; j < 3; ++j) inverse_[i][j] = cof(j, i) / det;
  }

  const Direction& pair(int p) const { return pairs_.at(p); }
  Direction vector(int v) const { return v % 2 == 0 ? pairs_.at(v / 2) : -pairs_.at(v / 2); }
  int lcm_denominator() const { return kDenominatorLcm; }

  // Row p of the inverse applied to (R11, R12, R22): the exact rational
  // coefficients of L_p.
  const std::array<std::array<Rational, 3>, 3>& inverse() const { return inverse_; }

  // L_p(R): the weights with sum_p L_p(R) kbar_p (x) kbar_p = R.
  std::array<double, 3> weights(const SymMatrix2& R) const {
    std::array<double, 3> c{};
    for (int p = 0; p < 3; ++p)
      c[p] = inverse_[p][0].value() * R.a11 + inverse_[p][1].value() * R.a12 + inverse_[p][2].value() * R.a22;
    return c;
  }

  SymMatrix2 recombine(const std::array<double, 3>& c) const {
    SymMatrix2 R;
    for (int p = 0; p < 3; ++p) {
      auto kb = pairs_[p].kbar();
      R.a11 += c[p] * kb[0] * kb[0];
      R.a12 += c[p] * kb[0] * kb[1];
      R.a22 += c[p] * kb[1] * kb[1];
    }
    return R;
  }

  nlohmann::json to_json() const {
    nlohmann::json j;
    auto rat = [](Rational r) { return nlohmann::json{{"num", r.num}, {"den", r.den}}; };
    for (int v = 0; v < kVectors; ++v) {
      auto d = vector(v);
      j["vectors"].push_back({{"k", {rat(d.k1), rat(d.k2)}}, {"kbar", {rat(d.kbar1()), rat(d.kbar2())}}});
    }
    j["lcm_denominator"] = kDenominatorLcm;
    return j;
  }

 private:
  std::array<Direction, 3> pairs_;
  std::array<std::array<Rational, 3>, 3> inverse_;
};

inline std::string direction_name(const Direction& d) {
  auto r = [](Rational x) { return x.den == 1 ? std::to_string(x.num) : std::to_string(x.num) + "/" + std::to_string(x.den); };
  return "(" + r(d.k1) + ", " + r(d.k2) + ")";
}

inline constexpr double kDecompositionRadius = 1e-3;

// Per-pair amplitudes a_p = sqrt(L_p(R)) for R within the Frobenius ball of
// radius 1e-3 around the identity. With relaxed = true any R with all
// L_p(R) > 0 is accepted.
inline std::array<double, 3> decompose(const DirectionSet& L, const SymMatrix2& R, bool relaxed = false) {
  auto c = L.weights(R);
  for (int p = 0; p < 3; ++p)
    if (!(c[p] > 0.0))
      throw GeometryError("decompose: weight for k = " + direction_name(L.pair(p)) +
                          " is not positive (" + std::to_string(c[p]) + ")");
  double d = R.frobenius_distance(SymMatrix2::identity());
  if (!relaxed && d > kDecompositionRadius)
    throw GeometryError("decompose: |R - Id|_F = " + std::to_string(d) + " exceeds " +
                        std::to_string(kDecompositionRadius));
  return {std::sqrt(c[0]), std::sqrt(c[1]), std::sqrt(c[2])};
}

struct StationaryFlowResiduals {
  double w_sup = 0.0;
  double divergence = 0.0;          // max |div W|
  double pressure = 0.0;            // div(W (x) W) - 1/2 grad(|W|^2 + psi^2)
  double pressure_minus_sign = 0.0; // same with psi^2 entering with a minus sign
  double expansion = 0.0;           // W (x) W against the pairwise mode expansion
};

// W = sum_k b_k (i kbar) e^{i mu k.x}; b is indexed like DirectionSet::vector
// and must satisfy b_k = b_{-k}.
inline VectorField stationary_flow(const DirectionSet& L, const std::array<double, 6>& b, int mu, Grid g) {
  for (int p = 0; p < 3; ++p)
    if (b[2 * p] != b[2 * p + 1]) throw GeometryError("amplitudes must satisfy b_k = b_{-k}");
  VectorField W(g);
  for (int v = 0; v < 6; ++v) {
    if (b[v] == 0.0) continue;
    auto d = L.vector(v);
    if ((Rational(mu) * d.k1).den != 1 || (Rational(mu) * d.k2).den != 1)
      throw GeometryError("mu k is not an integer frequency for k = " + direction_name(d));
    int K1 = int(std::lround(mu * d.k1.value())), K2 = int(std::lround(mu * d.k2.value()));
    if (std::max(std::abs(K1), std::abs(K2)) >= g.n() / 2) throw GeometryError("mu k is not resolved on the grid");
    auto kb = d.kbar();
    W[0].mode(K1, K2) += cplx(0.0, b[v] * kb[0]);
    W[1].mode(K1, K2) += cplx(0.0, b[v] * kb[1]);
  }
  return W;
}

inline StationaryFlowResiduals stationary_flow_identity_check(const DirectionSet& L, const std::array<double, 6>& b,
                                                              int mu, Grid g) {
  VectorField W = stationary_flow(L, b, mu, g);
  if (4 * mu >= g.n()) throw GeometryError("quadratic terms at 2 mu are not resolved on the grid");
  ScalarField psi(g);
  for (int v = 0; v < 6; ++v) {
    if (b[v] == 0.0) continue;
    auto d = L.vector(v);
    psi.mode(int(std::lround(mu * d.k1.value())), int(std::lround(mu * d.k2.value()))) += b[v];
  }
  StationaryFlowResiduals r;
  r.w_sup = sup_norm(W);
  r.divergence = sup_norm(divergence(W));

  MatrixField WW(g);
  for (int a = 0; a < 2; ++a)
    for (int c = 0; c < 2; ++c) WW(a, c) = spectral_product(W[a], W[c]);
  VectorField divWW = divergence(WW);
  ScalarField w2 = WW(0, 0) + WW(1, 1);
  ScalarField p2 = spectral_product(psi, psi);
  VectorField plus = gradient(w2 + p2), minus = gradient(w2 - p2);
  plus *= 0.5;
  minus *= 0.5;
  r.pressure = sup_norm(divWW - plus);
  r.pressure_minus_sign = sup_norm(divWW - minus);

  MatrixField E(g);
  for (int v = 0; v < 6; ++v)
    for (int u = 0; u < 6; ++u) {
      if (b[v] == 0.0 || b[u] == 0.0) continue;
      auto dj = L.vector(v), dk = L.vector(u);
      auto jb = dj.kbar(), kb = dk.kbar();
      int K1 = int(std::lround(mu * (dj.k1 + dk.k1).value())), K2 = int(std::lround(mu * (dj.k2 + dk.k2).value()));
      bool resonant = (K1 == 0 && K2 == 0);
      for (int a = 0; a < 2; ++a)
        for (int c = 0; c < 2; ++c) {
          if (resonant)
            E(a, c).mode(0, 0) += b[u] * b[u] * kb[a] * kb[c];
          else
            E(a, c).mode(K1, K2) += -b[v] * b[u] * jb[a] * kb[c];
        }
    }
  r.expansion = sup_norm(WW - E);
  return r;
}

}  // namespace nsbmo
