#include <gtest/gtest.h>

#include <random>

#include "nsbmo/geometry.hpp"

using namespace nsbmo;

TEST(DirectionSet, VectorsAndRotations) {
  DirectionSet L;
  EXPECT_EQ(L.lcm_denominator(), 5);
  auto d1 = L.pair(1);
  EXPECT_EQ(d1.kbar1(), Rational(-4, 5));
  EXPECT_EQ(d1.kbar2(), Rational(3, 5));
  auto d2 = L.pair(2);
  EXPECT_EQ(d2.kbar1(), Rational(4, 5));
  EXPECT_EQ(d2.kbar2(), Rational(3, 5));
  EXPECT_EQ(L.pair(0).kbar1(), Rational(0));
  EXPECT_EQ(L.pair(0).kbar2(), Rational(1));
  for (int v = 0; v < 6; ++v) {
    auto d = L.vector(v);
    EXPECT_EQ(d.k1 * d.k1 + d.k2 * d.k2, Rational(1));
  }
}

TEST(DirectionSet, IdentityWeightsAreExact) {
  DirectionSet L;
  // inverse applied to (1, 0, 1) in exact arithmetic
  const auto& inv = L.inverse();
  std::array<Rational, 3> c;
  for (int p = 0; p < 3; ++p) c[p] = inv[p][0] + inv[p][2];
  EXPECT_EQ(c[0], Rational(7, 16));
  EXPECT_EQ(c[1], Rational(25, 32));
  EXPECT_EQ(c[2], Rational(25, 32));
  auto a = decompose(L, SymMatrix2::identity());
  EXPECT_NEAR(a[0] * a[0], 7.0 / 16, 1e-15);
  EXPECT_NEAR(a[1] * a[1], 25.0 / 32, 1e-15);
}

TEST(DirectionSet, RejectsOutsideBall) {
  DirectionSet L;
  try {
    decompose(L, SymMatrix2{1.0, 0.0, 0.0});
    FAIL();
  } catch (const GeometryError& e) {
    EXPECT_NE(std::string(e.what()).find("(1, 0)"), std::string::npos);
  }
  EXPECT_THROW(decompose(L, SymMatrix2{1.01, 0.0, 1.0}), GeometryError);
  EXPECT_NO_THROW(decompose(L, SymMatrix2{1.01, 0.0, 1.0}, true));
  EXPECT_NEAR(L.weights(SymMatrix2{1.0, 0.0, 0.0})[0], -9.0 / 16, 1e-15);
}

TEST(DirectionSet, RandomBallRecombination) {
  DirectionSet L;
  std::mt19937_64 rng(2024);
  std::uniform_real_distribution<double> u(-1.0, 1.0);
  for (int i = 0; i < 1000; ++i) {
    SymMatrix2 R{1.0 + 4e-4 * u(rng), 4e-4 * u(rng), 1.0 + 4e-4 * u(rng)};
    auto a = decompose(L, R);
    auto back = L.recombine({a[0] * a[0], a[1] * a[1], a[2] * a[2]});
    EXPECT_LE(back.frobenius_distance(R), 1e-14);
  }
}

TEST(DirectionSet, JsonUsesRationalPairs) {
  DirectionSet L;
  auto j = L.to_json();
  ASSERT_EQ(j["vectors"].size(), 6u);
  EXPECT_EQ(j["vectors"][2]["k"][1]["num"], 4);
  EXPECT_EQ(j["vectors"][2]["k"][1]["den"], 5);
  EXPECT_EQ(j["vectors"][2]["kbar"][0]["num"], -4);
}

TEST(StationaryFlow, SinglePair) {
  DirectionSet L;
  Grid g(32);
  auto W = stationary_flow(L, {1, 1, 0, 0, 0, 0}, 1, g);
  EXPECT_NEAR(W[1].mode(1, 0).real(), 0.0, 0);
  EXPECT_NEAR(W[1].mode(1, 0).imag(), 1.0, 0);  // -2 sin x1 = i e^{ix} - i e^{-ix}
  EXPECT_NEAR(W[1].mode(-1, 0).imag(), -1.0, 0);
  auto r = stationary_flow_identity_check(L, {1, 1, 0, 0, 0, 0}, 5, g);
  EXPECT_LE(r.divergence, 1e-12);
  EXPECT_LE(r.pressure, 1e-12);
  EXPECT_LE(r.expansion, 1e-12);
  // the identity with psi^2 subtracted does not hold
  EXPECT_GT(r.pressure_minus_sign, 1.0);
}

TEST(StationaryFlow, RandomAmplitudes) {
  DirectionSet L;
  Grid g(128);
  std::mt19937_64 rng(7);
  std::uniform_real_distribution<double> u(-2.0, 2.0);
  for (int mu : {5, 10, 20}) {
    for (int t = 0; t < 5; ++t) {
      std::array<double, 6> b;
      for (int p = 0; p < 3; ++p) b[2 * p] = b[2 * p + 1] = u(rng);
      auto r = stationary_flow_identity_check(L, b, mu, g);
      double s = r.w_sup * r.w_sup;
      EXPECT_LE(r.divergence, 1e-11 * r.w_sup * mu);
      EXPECT_LE(r.pressure, 1e-11 * s * mu);
      EXPECT_LE(r.expansion, 1e-11 * s);
    }
  }
}

TEST(StationaryFlow, Errors) {
  DirectionSet L;
  Grid g(32);
  EXPECT_THROW(stationary_flow(L, {1, 2, 0, 0, 0, 0}, 5, g), GeometryError);
  EXPECT_THROW(stationary_flow(L, {0, 0, 1, 1, 0, 0}, 3, g), GeometryError);
  EXPECT_THROW(stationary_flow_identity_check(L, {1, 1, 0, 0, 0, 0}, 10, g), GeometryError);
}
