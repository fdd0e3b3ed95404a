#pragma once
#include <random>

#include "nsbmo/spectral.hpp"

namespace testutil {

using namespace nsbmo;

// Real field with random coefficients on |xi|_inf <= band, zero mean.
inline ScalarField random_real(Grid g, int band, unsigned seed, double amp = 1.0) {
  std::mt19937_64 rng(seed);
  std::normal_distribution<double> nd(0.0, amp);
  ScalarField f(g, true);
  for (int k1 = -band; k1 <= band; ++k1)
    for (int k2 = -band; k2 <= band; ++k2) {
      if (k1 == 0 && k2 == 0) continue;
      // fill one of each conjugate pair
      if (k1 < 0 || (k1 == 0 && k2 < 0)) continue;
      cplx z(nd(rng), nd(rng));
      f.mode(k1, k2) = z;
      f.mode(-k1, -k2) = std::conj(z);
    }
  return f;
}

inline ScalarField random_complex(Grid g, int band, unsigned seed) {
  std::mt19937_64 rng(seed);
  std::normal_distribution<double> nd(0.0, 1.0);
  ScalarField f(g, false);
  for (int k1 = -band; k1 <= band; ++k1)
    for (int k2 = -band; k2 <= band; ++k2) f.mode(k1, k2) = cplx(nd(rng), nd(rng));
  return f;
}

// Divergence-free real field: perp gradient of a random stream function.
inline VectorField random_solenoidal(Grid g, int band, unsigned seed, double amp = 1.0) {
  return perp_gradient(random_real(g, band, seed, amp));
}

inline ScalarField from_function(Grid g, auto fn) {
  RVec v(g.size());
  const int n = g.n();
  for (int i = 0; i < n; ++i)
    for (int j = 0; j < n; ++j) v[std::size_t(i) * n + j] = fn(i * g.h(), j * g.h());
  return ScalarField::from_physical(g, v);
}

inline double max_coeff_diff(const ScalarField& a, const ScalarField& b) {
  double e = 0.0;
  for (std::size_t i = 0; i < a.coeffs().size(); ++i) e = std::max(e, std::abs(a[i] - b[i]));
  return e;
}
inline double max_coeff_diff(const VectorField& a, const VectorField& b) {
  return std::max(max_coeff_diff(a[0], b[0]), max_coeff_diff(a[1], b[1]));
}

}  // namespace testutil
