#include <gtest/gtest.h>

#include <filesystem>

#include "nsbmo/field_io.hpp"
#include "nsbmo/spectral.hpp"
#include "test_util.hpp"

using namespace nsbmo;
using namespace testutil;

TEST(Grid, RejectsNonPowerOfTwo) {
  EXPECT_THROW(Grid(24), SpectralError);
  EXPECT_THROW(Grid(8), SpectralError);
  EXPECT_NO_THROW(Grid(16));
}

TEST(Transform, RoundTripReal) {
  Grid g(64);
  auto f = random_real(g, 31, 1);
  EXPECT_LE(transform_roundtrip_error(f), 1e-13);
}

TEST(Transform, RoundTripComplex) {
  Grid g(32);
  auto f = random_complex(g, 15, 2);
  EXPECT_LE(transform_roundtrip_error(f), 1e-13);
}

TEST(Transform, PhysicalSamplesMatchSeries) {
  Grid g(16);
  ScalarField f(g, true);
  f.mode(2, -1) = cplx(0.5, 0.25);
  f.mode(-2, 1) = cplx(0.5, -0.25);
  RVec p = f.to_physical();
  for (int i : {0, 3, 7})
    for (int j : {1, 5, 15}) {
      double x1 = i * g.h(), x2 = j * g.h();
      double ref = std::cos(2 * x1 - x2) - 0.5 * std::sin(2 * x1 - x2);
      EXPECT_NEAR(p[i * 16 + j], ref, 1e-14);
    }
}

TEST(Operators, GradientOfProductMode) {
  Grid g(32);
  auto f = from_function(g, [](double x, double y) { return std::sin(3 * x) * std::cos(2 * y); });
  auto gr = gradient(f);
  auto d1 = from_function(g, [](double x, double y) { return 3 * std::cos(3 * x) * std::cos(2 * y); });
  auto d2 = from_function(g, [](double x, double y) { return -2 * std::sin(3 * x) * std::sin(2 * y); });
  EXPECT_LE(max_coeff_diff(gr[0], d1), 1e-14);
  EXPECT_LE(max_coeff_diff(gr[1], d2), 1e-14);
}

TEST(Operators, CurlOfPerpGradientIsMinusLaplacian) {
  Grid g(32);
  auto f = random_real(g, 10, 3);
  auto lhs = curl2d(perp_gradient(f));
  auto rhs = laplacian(f);
  rhs *= -1.0;
  EXPECT_LE(max_coeff_diff(lhs, rhs), 1e-12);
  EXPECT_LE(divergence(perp_gradient(f)).max_abs_coeff(), 1e-13);
}

TEST(Operators, InverseLaplacianOfSine) {
  Grid g(32);
  auto f = from_function(g, [](double x, double) { return std::sin(2 * x); });
  auto u = inverse_laplacian(f);
  auto ref = from_function(g, [](double x, double) { return std::sin(2 * x) / 4.0; });
  EXPECT_LE(max_coeff_diff(u, ref), 1e-15);
}

TEST(Operators, InverseLaplacianRejectsMean) {
  Grid g(16);
  auto f = from_function(g, [](double, double) { return 1.0; });
  EXPECT_THROW(inverse_laplacian(f), SpectralError);
}

TEST(Operators, HeatSemigroup) {
  Grid g(16);
  auto f = from_function(g, [](double x, double y) { return std::cos(x + 2 * y); });
  auto h = heat_semigroup(f, 0.3);
  EXPECT_NEAR(h.mode(1, 2).real(), 0.5 * std::exp(-5 * 0.3), 1e-15);
}

TEST(Operators, LerayProjection) {
  Grid g(32);
  auto sol = random_solenoidal(g, 8, 4);
  auto pot = gradient(random_real(g, 8, 5));
  auto v = sol + pot;
  auto p = leray_project(v);
  EXPECT_LE(divergence(p).max_abs_coeff(), 1e-13);
  EXPECT_LE(max_coeff_diff(p, sol), 1e-13);
  EXPECT_LE(max_coeff_diff(leray_project(p), p), 1e-13);
}

TEST(Operators, CalderonLiftExample) {
  Grid g(16);
  VectorField w(g);
  w[1] = from_function(g, [](double x, double) { return std::sin(x); });
  auto R = calderon_lift(w);
  auto mc = from_function(g, [](double x, double) { return -std::cos(x); });
  EXPECT_LE(R(0, 0).max_abs_coeff(), 1e-16);
  EXPECT_LE(R(1, 1).max_abs_coeff(), 1e-16);
  EXPECT_LE(max_coeff_diff(R(0, 1), mc), 1e-15);
  EXPECT_LE(max_coeff_diff(R(1, 0), mc), 1e-15);
}

TEST(Operators, CalderonLiftInvertsDivergence) {
  Grid g(64);
  for (unsigned seed : {10u, 11u, 12u}) {
    auto w = random_solenoidal(g, 20, seed);
    auto R = calderon_lift(w);
    EXPECT_LE(max_coeff_diff(divergence(R), w), 1e-12 * w[0].max_abs_coeff());
    EXPECT_LE(max_coeff_diff(R(0, 1), R(1, 0)), 1e-16);
  }
}

TEST(Operators, CalderonLiftRejectsMean) {
  Grid g(16);
  VectorField w(g);
  w[0].mode(0, 0) = 1.0;
  EXPECT_THROW(calderon_lift(w), SpectralError);
}

TEST(Product, SineCosine) {
  Grid g(16);
  auto s = from_function(g, [](double x, double) { return std::sin(x); });
  auto c = from_function(g, [](double x, double) { return std::cos(x); });
  auto p = spectral_product(s, c);
  auto ref = from_function(g, [](double x, double) { return 0.5 * std::sin(2 * x); });
  EXPECT_LE(max_coeff_diff(p, ref), 1e-15);
}

// Direct convolution of coefficients, truncated to |xi|_inf < n/2.
static ScalarField convolution_oracle(const ScalarField& a, const ScalarField& b) {
  const Grid& g = a.grid();
  const int n = g.n();
  ScalarField out(g, false);
  for (int i = 0; i < n; ++i)
    for (int j = 0; j < n; ++j) {
      cplx za = a[i * n + j];
      if (za == cplx(0.0)) continue;
      for (int k = 0; k < n; ++k)
        for (int l = 0; l < n; ++l) {
          int q1 = g.wavenumber(i) + g.wavenumber(k), q2 = g.wavenumber(j) + g.wavenumber(l);
          if (std::abs(q1) >= n / 2 || std::abs(q2) >= n / 2) continue;
          out.mode(q1, q2) += za * b[k * n + l];
        }
    }
  return out;
}

TEST(Product, MatchesTruncatedConvolution) {
  Grid g(16);
  auto a = random_real(g, 7, 20);
  auto b = random_real(g, 7, 21);
  auto p = spectral_product(a, b);
  auto ref = convolution_oracle(a, b);
  EXPECT_LE(max_coeff_diff(p, ref), 1e-13);
  auto ca = random_complex(g, 7, 22);
  EXPECT_LE(max_coeff_diff(spectral_product(ca, b), convolution_oracle(ca, b)), 1e-13);
}

TEST(Product, ExactForThirdBand) {
  Grid g(32);
  auto a = random_real(g, 10, 23);
  auto b = random_real(g, 5, 24);
  // band 15 < n/2: the untruncated product is representable
  auto p = spectral_product(a, b);
  EXPECT_LE(p.band(1e-14), 15);
  EXPECT_LE(max_coeff_diff(p, convolution_oracle(a, b)), 1e-13);
}

TEST(Shift, MovesModes) {
  Grid g(16);
  ScalarField f(g, true);
  f.mode(1, 0) = 1.0;
  auto s = shift_modes(f, 2, 3);
  EXPECT_EQ(s.mode(3, 3), cplx(1.0));
  EXPECT_THROW(shift_modes(f, 7, 0), SpectralError);
}

TEST(SupNorm, OversampledSine) {
  Grid g(16);
  auto f = from_function(g, [](double x, double) { return 2 * std::sin(3 * x); });
  EXPECT_NEAR(sup_norm(f), 2.0, 1e-2);
}

TEST(NSF2, RoundTripIsBitExact) {
  Grid g(16);
  Snapshot s{0.125, {random_real(g, 7, 30), random_complex(g, 7, 31)}};
  auto bytes = encode_nsf2(s);
  auto back = decode_nsf2(bytes);
  EXPECT_EQ(back.time, 0.125);
  ASSERT_EQ(back.components.size(), 2u);
  EXPECT_TRUE(back.components[0].is_real());
  EXPECT_FALSE(back.components[1].is_real());
  EXPECT_EQ(std::memcmp(back.components[0].data(), s.components[0].data(), g.size() * 16), 0);
  EXPECT_EQ(std::memcmp(back.components[1].data(), s.components[1].data(), g.size() * 16), 0);
  EXPECT_EQ(encode_nsf2(back), bytes);
}

TEST(NSF2, HeaderLayout) {
  Grid g(16);
  auto bytes = encode_nsf2(Snapshot{1.0, {ScalarField(g)}});
  EXPECT_EQ(bytes.size(), 4u + 4 + 4 + 1 + 8 + 16u * 256);
  EXPECT_EQ(bytes.substr(0, 4), "NSF2");
  EXPECT_EQ(std::uint8_t(bytes[4]), 1);
  EXPECT_EQ(std::uint8_t(bytes[8]), 16);
  EXPECT_EQ(std::uint8_t(bytes[12]), 1);
}

TEST(NSF2, Errors) {
  Grid g(16);
  auto bytes = encode_nsf2(Snapshot{0.0, {ScalarField(g)}});
  auto bad = bytes;
  bad[0] = 'X';
  EXPECT_THROW(decode_nsf2(bad), FieldIOError);
  auto v2 = bytes;
  v2[4] = 2;
  try {
    decode_nsf2(v2);
    FAIL();
  } catch (const FieldIOError& e) {
    EXPECT_NE(std::string(e.what()).find("version 2"), std::string::npos);
  }
  EXPECT_THROW(decode_nsf2(bytes.substr(0, bytes.size() - 1)), FieldIOError);
  EXPECT_THROW(decode_nsf2(bytes.substr(0, 10)), FieldIOError);
}

TEST(NSF2, AtomicFileRoundTrip) {
  Grid g(16);
  auto dir = std::filesystem::temp_directory_path() / "nsbmo_io_test";
  std::filesystem::remove_all(dir);
  Snapshot s{2.0, {random_real(g, 5, 40)}};
  write_nsf2(dir / "f.nsf2", s);
  EXPECT_FALSE(std::filesystem::exists(dir / "f.nsf2.tmp"));
  auto back = read_nsf2(dir / "f.nsf2");
  EXPECT_EQ(encode_nsf2(back), encode_nsf2(s));
  std::filesystem::remove_all(dir);
}
