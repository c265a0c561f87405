#include <gtest/gtest.h>

#include <cmath>
#include <numbers>
#include <sstream>

#include "hjs/analytic_control.hpp"
#include "hjs/riccati.hpp"

using namespace hjs;

namespace {

GaussianComponent gauss1(double m, double sd) { return {Vector::Constant(1, m), Matrix::Constant(1, 1, sd * sd)}; }

Vector v1(double x) { return Vector::Constant(1, x); }

RiccatiSolution solve(const SdeModel& m, const GaussianMixturePrior& p, double step = 1e-4, double dt = 0.01) {
  return solve_riccati(m, p, step, TimeGrid::covering(0.0, m.horizon(), dt));
}

}  // namespace

TEST(SolveRiccati, BrownianIsExact) {
  const auto sol = solve(SdeModel::brownian(1, 1.0, 1.0), GaussianMixturePrior(gauss1(0, 1)), 0.01, 0.1);
  for (std::size_t k = 0; k <= 10; ++k) EXPECT_NEAR(sol.components[0].Q[k](0, 0), 1.0 + 0.1 * double(k), 1e-13);
}

TEST(SolveRiccati, OuAgainstClosedForm) {
  const double B = 3, eps = 1.5;
  const auto sol = solve(SdeModel::linear(eps, 1.0, Matrix::Constant(1, 1, -B)), GaussianMixturePrior(gauss1(0, 1)));
  const auto& c = sol.components[0];
  for (std::size_t k : {0u, 25u, 50u, 100u}) {
    const double t = 0.01 * double(k);
    const double Q = 1 / (2 * B) + (1 / eps - 1 / (2 * B)) * std::exp(-2 * B * t);
    EXPECT_NEAR(c.Q[k](0, 0), Q, 1e-3 * Q) << t;
    EXPECT_EQ(c.q[k](0), 0.0);
    // r(t) = (eps/2) log(2 pi e^{-2Bt} sigma^2 + pi eps (1 - e^{-2Bt}) / B)
    const double r = 0.5 * eps *
                     std::log(2 * std::numbers::pi * std::exp(-2 * B * t) + std::numbers::pi * eps * (1 - std::exp(-2 * B * t)) / B);
    EXPECT_NEAR(c.r[k], r, 1e-3 * std::max(1.0, std::abs(r))) << t;
  }
  EXPECT_NEAR(c.Q[100](0, 0), 0.16790, 1e-3 * 0.16790);
}

TEST(SolveRiccati, InitialConditions) {
  Matrix S(2, 2);
  S << 0.25, 0.1, 0.1, 0.16;
  Vector th(2);
  th << -0.7, 0.0;
  const double eps = 5;
  Matrix A(2, 2);
  A << 0, 1, -1, -1;
  const auto sol = solve(SdeModel::linear(eps, 0.1, A), GaussianMixturePrior(GaussianComponent(th, S)), 1e-4, 0.01);
  const auto& c = sol.components[0];
  EXPECT_TRUE(c.Q[0].isApprox(S / eps, 1e-15));
  EXPECT_TRUE(c.q[0].isApprox(th, 1e-15));
  EXPECT_NEAR(c.r[0], eps * std::log(2 * std::numbers::pi) + 0.5 * eps * std::log(S.determinant()), 1e-12);
}

TEST(SolveRiccati, SymmetryAndPositivityAtEveryNode) {
  Matrix A(2, 2);
  A << 0, -1, 1, 1;
  A = -A;
  Matrix S1(2, 2), S2(2, 2);
  S1 << 0.25, 0.1, 0.1, 0.16;
  S2 << 0.25, -0.1, -0.1, 0.16;
  Vector m1(2), m2(2);
  m1 << -0.7, 0;
  m2 << 0.7, 0;
  const auto sol = solve(SdeModel::linear(5.0, 1.0, A),
                         GaussianMixturePrior({{m1, S1}, {m2, S2}}, Vector::Constant(2, 0.5)), 1e-4, 0.01);
  for (const auto& c : sol.components)
    for (const auto& Q : c.Q) {
      EXPECT_LE(num::asymmetry(Q), 1e-10);
      EXPECT_EQ(Eigen::LLT<Matrix>(Q).info(), Eigen::Success);
    }
}

TEST(SolveRiccati, SingularDiffusionStaysPositive) {
  Matrix A(2, 2), sigma(2, 2);
  A << 0, 1, -1, -1;
  sigma << 0, 0, 0, 1;
  const auto model = SdeModel::linear(1e-3, 5.0, A, Vector::Zero(2), sigma);
  Matrix S = Matrix::Identity(2, 2) * 0.01;
  const auto sol = solve(model, GaussianMixturePrior(GaussianComponent(Vector::Constant(2, 0.1), S)), 1e-3, 0.01);
  EXPECT_EQ(sol.components[0].Q.size(), 501u);
}

TEST(SolveRiccati, LossOfPositivityIsFatal) {
  const auto model = SdeModel::linear(1.0, 1.0, Matrix::Constant(1, 1, -1000.0));
  EXPECT_THROW(solve(model, GaussianMixturePrior(gauss1(0, 1)), 0.01, 0.01), NumericalError);
}

TEST(SolveRiccati, Preconditions) {
  const auto m = SdeModel::brownian(1, 1, 1);
  const GaussianMixturePrior p(gauss1(0, 1));
  EXPECT_THROW(solve_riccati(m, p, 0.1, TimeGrid::covering(0, 1, 0.01)), PreconditionError);
  EXPECT_THROW(solve_riccati(m, p, 0.003, TimeGrid::covering(0, 1, 0.01)), PreconditionError);
  EXPECT_THROW(solve_riccati(m, p, 0.01, TimeGrid::covering(0, 0.5, 0.01)), PreconditionError);
  GeneralDrift g{[](const Eigen::Ref<const Vector>& x, double, Eigen::Ref<Vector> out) { out = x; }};
  EXPECT_THROW(solve_riccati(SdeModel(1, 1, 1, g), p, 0.01, TimeGrid::covering(0, 1, 0.01)), PreconditionError);
}

TEST(RiccatiControl, SingleComponentExample) {
  const RiccatiControl rc(solve(SdeModel::brownian(1, 1.0, 1.0), GaussianMixturePrior(gauss1(0, 1)), 1e-3, 0.01));
  EXPECT_NEAR(rc.evaluate(v1(2.0), 0.0)(0), -1.0, 1e-12);
}

TEST(RiccatiControl, DuplicatedComponentsMatchSingle) {
  const auto m = SdeModel::linear(0.7, 1.0, Matrix::Constant(1, 1, -0.5));
  const RiccatiControl one(solve(m, GaussianMixturePrior(gauss1(0.3, 0.6)), 1e-3));
  const RiccatiControl two(solve(m, GaussianMixturePrior({gauss1(0.3, 0.6), gauss1(0.3, 0.6)}, Vector{{0.2, 0.8}}), 1e-3));
  for (double x : {-2.0, 0.0, 1.3})
    for (double tau : {0.0, 0.37, 1.0}) EXPECT_NEAR(one.evaluate(v1(x), tau)(0), two.evaluate(v1(x), tau)(0), 1e-12);
}

TEST(RiccatiControl, SymmetricMixtureIsZeroAtOrigin) {
  const RiccatiControl rc(solve(SdeModel::brownian(2, 0.5, 1.0),
                                GaussianMixturePrior({{Vector::Constant(2, 1.0), Matrix::Identity(2, 2) * 0.3},
                                                      {Vector::Constant(2, -1.0), Matrix::Identity(2, 2) * 0.3}},
                                                     Vector::Constant(2, 0.5)),
                                1e-3));
  for (double tau : {0.0, 0.5, 0.99}) EXPECT_LE(rc.evaluate(Vector::Zero(2), tau).cwiseAbs().maxCoeff(), 1e-12);
}

namespace {

double worst_gap(const SdeModel& model, const GaussianMixturePrior& prior, double step) {
  const RiccatiControl rc(solve(model, prior, step, step));
  const AnalyticCase ac = AnalyticCase::from(model, prior);
  double worst = 0;
  for (int j = 0; j < 10; ++j) {
    const double tau = 0.099 * j;
    for (int i = 0; i < 100; ++i) {
      const double x = -4 + 8 * i / 99.0;
      worst = std::max(worst, std::abs(rc.evaluate(v1(x), tau)(0) - ac.control(v1(x), tau)(0)));
    }
  }
  return worst;
}

}  // namespace

TEST(RiccatiControl, AgreesWithAnalyticMixture) {
  const GaussianMixturePrior prior({gauss1(0, 0.5), gauss1(-2, 0.8), gauss1(2, 0.6)}, Vector::Constant(3, 1.0 / 3));
  EXPECT_LE(worst_gap(SdeModel::brownian(1, 1.0, 1.0), prior, 1e-4), 1e-3);
}

TEST(RiccatiControl, OuGapIsFirstOrderInStep) {
  // Explicit Euler leaves an O(step) error in Q; the control amplifies it by |x| / Q^2 at the grid edge.
  const auto model = SdeModel::linear(1.5, 1.0, Matrix::Constant(1, 1, -3.0));
  const GaussianMixturePrior prior(gauss1(0, 1));
  const double coarse = worst_gap(model, prior, 1e-4), fine = worst_gap(model, prior, 1e-5);
  EXPECT_NEAR(coarse / fine, 10.0, 0.5);
  EXPECT_LE(fine, 1e-3);
}

TEST(RiccatiControl, ResponsibilitiesNormalized) {
  Matrix S1(2, 2), S2(2, 2);
  S1 << 0.25, 0.05, 0.05, 1.0 / 9;
  S2 << 0.0625, -0.05, -0.05, 0.25;
  const RiccatiControl rc(solve(SdeModel::brownian(2, 0.5, 1.0),
                                GaussianMixturePrior({{Vector::Constant(2, -0.5), S1}, {Vector::Constant(2, 0.5), S2}},
                                                     Vector::Constant(2, 0.5)),
                                1e-3));
  const Matrix X = 5.0 * Matrix::Random(2, 500);
  for (double tau : {0.0, 0.3, 1.0}) {
    const Matrix p = rc.responsibilities(X, tau);
    EXPECT_GE(p.minCoeff(), 0.0);
    EXPECT_LE(p.maxCoeff(), 1.0);
    EXPECT_LE((p.colwise().sum().array() - 1.0).abs().maxCoeff(), 1e-12);
  }
}

TEST(RiccatiControl, InterpolatesBetweenNodes) {
  // Q(t) = 1 + t is linear, so interpolation off the grid is exact.
  const RiccatiControl rc(solve(SdeModel::brownian(1, 1.0, 1.0), GaussianMixturePrior(gauss1(0, 1)), 0.1, 0.1));
  EXPECT_NEAR(rc.evaluate(v1(1.0), 0.05)(0), -1.0 / 1.95, 1e-13);
  EXPECT_THROW(rc.evaluate(v1(1.0), 1.2), PreconditionError);
}

TEST(RiccatiCsv, Header) {
  const auto sol = solve(SdeModel::brownian(2, 1.0, 1.0), GaussianMixturePrior(GaussianComponent(Vector::Zero(2), Matrix::Identity(2, 2))),
                         0.5, 0.5);
  std::ostringstream os;
  write_riccati_csv(os, sol);
  const auto s = os.str();
  EXPECT_EQ(s.substr(0, s.find('\n')), "component,k,t,Q11,Q12,Q21,Q22,q1,q2,r");
}
