#include <gtest/gtest.h>

#include "nsbmo/construction.hpp"
#include "test_util.hpp"

using namespace nsbmo;
using namespace testutil;

// ---------------------------------------------------------------------------
// Mollifiers

TEST(TimeMollifier, WeightsFormAProbability) {
  const auto& T = TimeMollifier::get();
  ASSERT_EQ(T.sigma().size(), 8u);
  double s = 0.0;
  for (std::size_t i = 0; i < 8; ++i) {
    EXPECT_GT(T.sigma()[i], 0.0);
    EXPECT_LT(T.sigma()[i], 1.0);
    EXPECT_GT(T.weight()[i], 0.0);
    s += T.weight()[i];
  }
  EXPECT_NEAR(s, 1.0, 1e-13);
}

// Independent oracle: 1e4-node midpoint rule of the normalized bump on the window [t, t + l].
static double midpoint_mollify(const std::function<double(double)>& f, double ell, double t) {
  const int N = 10000;
  double num = 0.0, den = 0.0;
  for (int j = 0; j < N; ++j) {
    double y = -1.0 + (j + 0.5) * 2.0 / N;
    double b = TimeMollifier::bump(y);
    num += b * f(t + ell * 0.5 * (y + 1.0));
    den += b;
  }
  return num / den;
}

TEST(TimeMollifier, ExponentialMatchesMidpointOracle) {
  const auto& T = TimeMollifier::get();
  auto f = [](double s) { return std::exp(-s); };
  for (double t : {0.0, 0.3, 2.0}) {
    double ell = 0.01, v = 0.0;
    for (std::size_t i = 0; i < 8; ++i) v += T.weight()[i] * f(t + ell * T.sigma()[i]);
    EXPECT_NEAR(v, midpoint_mollify(f, ell, t), 1e-8);
  }
}

TEST(TimeMollifier, WindowLiesInTheFuture) {
  Grid g(16);
  // a field that vanishes for s < 1 is still seen from t slightly before 1 only through s >= t
  ScalarAt f = [&](double s) {
    ScalarField v(g);
    v.mode(0, 0) = s >= 1.0 ? 1.0 : 0.0;
    return v;
  };
  EXPECT_NEAR(mollify_spacetime(f, 0.1, 1.0).mean().real(), 1.0, 1e-14);
  EXPECT_EQ(mollify_spacetime(f, 0.1, 0.85).mean().real(), 0.0);
  EXPECT_THROW(mollify_spacetime(f, 0.1, -1e-3), ConstructionError);
  EXPECT_THROW(mollify_spacetime(f, 0.0, 1.0), ConstructionError);
}

TEST(SpaceMollifier, SymbolNearOne) {
  const auto& S = SpaceMollifier::get();
  EXPECT_EQ(S.hat(0.0), 1.0);
  for (double r : {1e-3, 1e-2, 0.1, 0.5}) {
    double h = S.hat(r);
    EXPECT_LE(std::abs(h - 1.0), r * r);
    EXPECT_LT(h, 1.0);
  }
  // the Fourier transform of a bump decays
  EXPECT_LT(std::abs(S.hat(60.0)), 1e-3);
}

TEST(SpaceMollifier, FieldMultiplier) {
  Grid g(64);
  auto f = random_real(g, 20, 3);
  auto m = space_mollify(f, 0.01);
  for (int k1 = -20; k1 <= 20; ++k1)
    for (int k2 = -20; k2 <= 20; ++k2) {
      double r = 0.01 * std::hypot(k1, k2);
      EXPECT_LE(std::abs(m.mode(k1, k2) - f.mode(k1, k2)), r * r * std::abs(f.mode(k1, k2)) + 1e-16);
    }
  EXPECT_TRUE(m.is_real());
}

// ---------------------------------------------------------------------------
// Schedule

TEST(Schedule, ToyDefault) {
  auto S = ParamSchedule::toy_default();
  EXPECT_EQ(S.lambda_int(1), 25);
  EXPECT_EQ(S.lambda_int(3), 625);
  EXPECT_EQ(S.mu(2), 5);
  EXPECT_DOUBLE_EQ(S.ell(1), 1.0 / 625);
  EXPECT_THROW(S.lambda(4), ScheduleError);
}

TEST(Schedule, FormulaToyMode) {
  auto S = ParamSchedule::from_formula(5, 2, 2, 1, true, 2.0);
  EXPECT_EQ(S.lambda_int(1), 2500);
  EXPECT_EQ(S.mu(1) % 5, 0);
  EXPECT_THROW(ParamSchedule::from_formula(5, 2, 2, 1, false, 2.0), ScheduleError);
  EXPECT_THROW(ParamSchedule::from_formula(5, 2, 2, 6, true, 2.0), ScheduleError);
}

TEST(Schedule, StrictRejectedWithDigitCount) {
  try {
    ParamSchedule::from_formula(5, 1 << 15, 1 << 15, 1, false, 2.0);
    FAIL();
  } catch (const ScheduleError& e) {
    std::string m = e.what();
    EXPECT_NE(m.find("strict schedule rejected"), std::string::npos);
    // 4 log10 5 + 2^15 log10 2^15 ~ 147958 digits
    EXPECT_NE(m.find("147"), std::string::npos) << m;
  }
}

TEST(Schedule, Validation) {
  ParamSchedule S;
  S.lambdas = {25, 20};
  S.mus = {5, 5};
  EXPECT_THROW(S.validate(), ScheduleError);
  S.lambdas = {25, 125};
  S.mus = {5, 7};
  EXPECT_THROW(S.validate(), ScheduleError);
  S.mus = {5};
  EXPECT_THROW(S.validate(), ScheduleError);
}

// ---------------------------------------------------------------------------
// Concentration profile

class ProfileTest : public ::testing::Test {
 protected:
  static void SetUpTestSuite() { phi_ = new ConcentrationProfile(ConcentrationProfile::build()); }
  static void TearDownTestSuite() { delete phi_; }
  static ConcentrationProfile* phi_;
};
ConcentrationProfile* ProfileTest::phi_ = nullptr;

TEST_F(ProfileTest, UnitL2AndSupport) {
  EXPECT_NEAR(phi_->l2_squared(), 1.0, 1e-12);
  EXPECT_EQ(phi_->evaluate(0.0100001), 0.0);
  EXPECT_EQ(phi_->evaluate(-1.0), 0.0);
  EXPECT_GT(phi_->evaluate(0.0099), 0.0);
  double worst = 0.0;
  for (double s = 0.0105; s < kPi; s += 0.0137) worst = std::max(worst, std::abs(phi_->evaluate_bandlimited(s)));
  EXPECT_LE(worst, 1e-10);
}

TEST_F(ProfileTest, BandlimitedMatchesExactInside) {
  for (double s : {0.0, 0.002, -0.004, 0.007})
    EXPECT_NEAR(phi_->evaluate_bandlimited(s), phi_->evaluate(s), 1e-8 * phi_->evaluate(0.0));
}

TEST_F(ProfileTest, LiftedHasUnitMeanSquare) {
  auto v = phi_->lifted(48);
  double e = v[0] * v[0];
  for (int m = 1; m <= 48; ++m) e += 2 * v[m] * v[m];
  EXPECT_NEAR(e, 1.0, 1e-14);
  EXPECT_LE(std::abs(v[48]), 1e-30);
  EXPECT_THROW(phi_->lifted(1), ConstructionError);
}

TEST(Profile, Errors) {
  EXPECT_THROW(ConcentrationProfile::build(2048), ConstructionError);
  EXPECT_THROW(ConcentrationProfile::build(8192, 0.0), ConstructionError);
  EXPECT_THROW(ConcentrationProfile::build(8192, 4.0), ConstructionError);
}

// ---------------------------------------------------------------------------
// Cutoffs

TEST(Intervals, PeriodicUnionAndIntersection) {
  intervals::Set a;
  intervals::add_periodic(a, 0.1, 0.3);
  auto n = intervals::normalize(a);
  EXPECT_NEAR(intervals::measure(n), 0.6, 1e-15);
  intervals::Set b{{0.0, 0.2}};
  EXPECT_NEAR(intervals::measure(intervals::intersect(n, b)), 0.2, 1e-15);
}

TEST(Cutoffs, FractionsAreSmall) {
  auto S = ParamSchedule::toy_default();
  auto C = build_cutoffs(S, 2);
  EXPECT_EQ(C.top(), 3);
  double ft = C.omega_tilde_fraction(1024);
  EXPECT_LE(ft, 0.5);
  EXPECT_LE(ft, 0.125);
  EXPECT_LE(C.omega_fraction(1024), ft);
  EXPECT_NEAR(C.block_support_fraction(), 0.01 / kPi, 1e-17);
}

TEST(Cutoffs, SingleLevelFractionIsUnionOfStrips) {
  ParamSchedule S;
  S.lambdas = {25};
  S.mus = {5};
  CutoffSystem C(S, 1);
  // three strip families of relative width 2 r / (2 pi) each, overlapping only near crossings
  double one = 2 * 0.02 / (2 * kPi);
  double f = C.omega_tilde_fraction(2048);
  EXPECT_LE(f, 3 * one);
  EXPECT_GE(f, 3 * one - 3 * one * one - 1e-4);
}

TEST(Cutoffs, ChiPlateauAndSupport) {
  auto S = ParamSchedule::toy_default();
  CutoffSystem C(S, 2);
  EXPECT_EQ(C.chi(0.0, 0.0), 1.0);  // every phase vanishes at the origin
  EXPECT_TRUE(C.in_omega(0.0, 0.0));
  // a point far from the strips of some level
  bool found = false;
  for (double x = 0.05; x < 1.0 && !found; x += 0.0173)
    for (double y = 0.05; y < 1.0 && !found; y += 0.0191) {
      auto d = C.phase_distances(x, y);
      if (*std::max_element(d.begin(), d.end()) > 0.2) {
        EXPECT_EQ(C.chi(x, y), 0.0);
        EXPECT_FALSE(C.in_omega_tilde(x, y));
        found = true;
      }
    }
  EXPECT_TRUE(found);
}

TEST(Cutoffs, UnresolvableFieldIsRejected) {
  auto S = ParamSchedule::toy_default();
  CutoffSystem C(S, 1);
  EXPECT_FALSE(C.resolvable(Grid(2048)));
  EXPECT_GT(C.min_resolving_grid(), 2048);
  try {
    C.field(Grid(256));
    FAIL();
  } catch (const ConstructionError& e) {
    EXPECT_NE(std::string(e.what()).find("not resolved"), std::string::npos);
  }
}

TEST(Cutoffs, CnBoundsGrow) {
  auto S = ParamSchedule::toy_default();
  CutoffSystem C(S, 1);
  auto b = C.cn_bounds(2);
  ASSERT_EQ(b.size(), 3u);
  EXPECT_NEAR(b[0], 1.0, 1e-6);  // unit-mass kernel
  EXPECT_GT(b[1], b[0] / C.width());
  EXPECT_GT(b[2], b[1]);
}

// ---------------------------------------------------------------------------
// Heat modes

TEST(HeatMode, AnalyticAndDifference) {
  for (std::int64_t lam : {5, 25}) {
    auto r = heat_mode_check(Grid(128), lam, 0.3 / double(lam * lam));
    EXPECT_LE(r.analytic, 1e-15);
    EXPECT_LE(r.finite_difference, 1e-8);
  }
  EXPECT_THROW(heat_mode_check(Grid(128), 7, 0.0), ConstructionError);
}

// ---------------------------------------------------------------------------
// Seed and perturbation levels at desk scale: n = 512, lambda = 5, 25.

TEST(Seed, FieldAndLift) {
  Grid g(64);
  SeedLevel s(g, 5, 2.0);
  auto w = s.wp(0.0);
  // 2 * 5 sin(5 x1) e2
  EXPECT_NEAR(w[1].mode(5, 0).imag(), -5.0, 1e-15);
  EXPECT_EQ(w[0].max_abs_coeff(), 0.0);
  EXPECT_LE(sup_norm(divergence(s.Rwp(0.1)) - s.wp(0.1)), 1e-12);
  EXPECT_THROW(SeedLevel(g, 40), ConstructionError);
}

class LevelTest : public ::testing::Test {
 protected:
  static void SetUpTestSuite() {
    S_ = new ParamSchedule;
    S_->lambdas = {5, 25, 125};
    S_->mus = {5, 5, 5};
    S_->validate();
    phi_ = new ConcentrationProfile(ConcentrationProfile::build());
    seed_ = std::make_shared<SeedLevel>(Grid(512), 5);
    PerturbationOptions opt;
    opt.lift_modes = 8;
    L2_ = new PerturbationLevel(2, *S_, seed_, *phi_, select_C0(*S_, *seed_), std::nullopt, opt);
  }
  static void TearDownTestSuite() {
    delete L2_;
    delete phi_;
    delete S_;
    seed_.reset();
  }
  static double lam2() { return 625.0; }
  static ParamSchedule* S_;
  static ConcentrationProfile* phi_;
  static std::shared_ptr<SeedLevel> seed_;
  static PerturbationLevel* L2_;
};
ParamSchedule* LevelTest::S_ = nullptr;
ConcentrationProfile* LevelTest::phi_ = nullptr;
std::shared_ptr<SeedLevel> LevelTest::seed_;
PerturbationLevel* LevelTest::L2_ = nullptr;

TEST_F(LevelTest, C0UsesFloor) { EXPECT_EQ(L2_->C0(), 1000.0); }

TEST_F(LevelTest, DivergenceFreeAndSplitSums) {
  for (double t : {0.0, 0.4 / lam2()}) {
    auto w = L2_->wp(t);
    double s = sup_norm(w);
    EXPECT_LE(sup_norm(divergence(w)), 1e-13 * s * 25);
    auto sp = L2_->split(t);
    VectorField sum = sp.main + sp.rem1 + sp.rem2 + sp.rem3;
    EXPECT_LE(sup_norm(sum - w), 1e-14 * s);
  }
}

TEST_F(LevelTest, CalderonLiftInverts) {
  double t = 0.2 / lam2();
  auto w = L2_->wp(t);
  EXPECT_LE(sup_norm(divergence(L2_->Rwp(t)) - w), 1e-14 * sup_norm(w));
}

TEST_F(LevelTest, StressFormsAgree) {
  for (double t : {0.0, 0.5 / lam2()}) {
    auto a = L2_->ws(t), b = L2_->ws_raw(t);
    EXPECT_LE(sup_norm(a - b), 1e-12 * sup_norm(a));
  }
  EXPECT_EQ(L2_->initial_mismatch(), 0.0);
}

TEST_F(LevelTest, TimeDerivativesMatchDifferences) {
  double t = 0.3 / lam2(), h = 1e-3 / lam2();
  auto fd = fd4([&](double s) { return L2_->wp(s); }, t, h);
  auto an = L2_->dwp_dt(t);
  EXPECT_LE(sup_norm(fd - an), 1e-9 * sup_norm(an));
  auto fs = fd4([&](double s) { return L2_->ws(s); }, t, h);
  auto as = L2_->dws_dt(t);
  EXPECT_LE(sup_norm(fs - as), 1e-9 * sup_norm(as));
}

TEST_F(LevelTest, F1ContractHolds) {
  for (double t : {0.0, 0.3 / lam2()}) {
    auto [T, c] = L2_->assemble_F1(t);
    EXPECT_LE(c.relative, 1e-12) << c.breakdown();
    EXPECT_FALSE(T.support_included);
    // with chi = 1 the support term is roundoff
    EXPECT_LE(sup_norm(T.support), 1e-12 * c.scale);
    EXPECT_GT(sup_norm(T.cross), 0.0);
  }
}

TEST_F(LevelTest, AmplitudesStayNearIdentityWeights) {
  auto a = L2_->amplitudes(0.0);
  const double amp = std::sqrt(1000.0 * 1000.0);
  EXPECT_NEAR(a[0].base, amp * std::sqrt(7.0 / 16), 1e-10);
  EXPECT_NEAR(a[1].base, amp * std::sqrt(25.0 / 32), 1e-10);
  for (auto& x : a) EXPECT_LT(sup_norm(x.fluct), 1e-3 * x.base);
  EXPECT_THROW(L2_->amplitudes(-1.0), ConstructionError);
}

TEST_F(LevelTest, NeedsCutoffAboveSecondLevel) {
  auto L2 = std::shared_ptr<const Level>(L2_, [](const Level*) {});
  EXPECT_THROW(PerturbationLevel(3, *S_, L2, *phi_, 1000.0), ConstructionError);
  EXPECT_THROW(PerturbationLevel(4, *S_, L2, *phi_, 1000.0), ConstructionError);
}

TEST_F(LevelTest, UniformCutoffFieldIncludesSupportTerm) {
  Grid g(512);
  ScalarField one(g);
  one.mode(0, 0) = 1.0;
  PerturbationOptions opt;
  opt.lift_modes = 8;
  PerturbationLevel L(2, *S_, seed_, *phi_, 1000.0, one, opt);
  EXPECT_TRUE(L.has_cutoff());
  EXPECT_LE(L.support_violation(0.0), 1e-14);
  auto [T, c] = L.assemble_F1(0.1 / lam2());
  EXPECT_TRUE(T.support_included);
  EXPECT_LE(c.relative, 1e-12) << c.breakdown();
}

TEST(Level, ZeroSeedGivesConstantAmplitudes) {
  ParamSchedule S;
  S.lambdas = {5, 25};
  S.mus = {5, 5};
  auto phi = ConcentrationProfile::build(8192);
  auto seed = std::make_shared<SeedLevel>(Grid(256), 5, 0.0);
  PerturbationOptions opt;
  opt.lift_modes = 4;
  PerturbationLevel L(2, S, seed, phi, select_C0(S, *seed), std::nullopt, opt);
  auto a = L.amplitudes(0.0);
  for (auto& x : a) EXPECT_EQ(x.fluct.max_abs_coeff(), 0.0);
  EXPECT_EQ(sup_norm(L.ws(0.0)), 0.0);
  EXPECT_EQ(sup_norm(L.ws_raw(0.0)), 0.0);
  auto [T, c] = L.assemble_F1(0.0);
  EXPECT_EQ(sup_norm(T.gap), 0.0);
  EXPECT_LE(c.relative, 1e-12);
}

TEST(Level, BallViolationAsksForLargerC0) {
  ParamSchedule S;
  S.lambdas = {5, 25};
  S.mus = {5, 5};
  auto phi = ConcentrationProfile::build(8192);
  auto seed = std::make_shared<SeedLevel>(Grid(256), 5, 1e5);
  PerturbationOptions opt;
  opt.lift_modes = 4;
  try {
    PerturbationLevel L(2, S, seed, phi, 1000.0, std::nullopt, opt);
    FAIL();
  } catch (const ConstructionError& e) {
    EXPECT_NE(std::string(e.what()).find("raise C0"), std::string::npos) << e.what();
  }
}

TEST(Level, UnresolvedGridIsRejected) {
  ParamSchedule S;
  S.lambdas = {5, 25};
  S.mus = {5, 5};
  auto phi = ConcentrationProfile::build(8192);
  auto seed = std::make_shared<SeedLevel>(Grid(64), 5);
  PerturbationOptions opt;
  opt.lift_modes = 4;
  EXPECT_THROW(PerturbationLevel(2, S, seed, phi, 1000.0, std::nullopt, opt), ConstructionError);
}
