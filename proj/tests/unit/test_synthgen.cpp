#include <cmath>
#include <numbers>

#include "divae/synthgen.hpp"
#include "test_support.hpp"

namespace {

using namespace divae;

Gmm2dSpec unit_gaussian() {
  Gmm2dSpec s;
  s.weights = {1.0};
  s.means = {{0.0, 0.0}};
  s.covs = {{1.0, 0.0, 0.0, 1.0}};
  return s;
}

TEST(Gmm2d, SampleMomentsOfUnitGaussian) {
  const GmmSample s = sample_gmm2d(unit_gaussian(), 100000, 1);
  double m0 = 0, m1 = 0;
  for (const auto& p : s.points) {
    m0 += p[0];
    m1 += p[1];
  }
  m0 /= 1e5;
  m1 /= 1e5;
  double c00 = 0, c01 = 0, c11 = 0;
  for (const auto& p : s.points) {
    c00 += (p[0] - m0) * (p[0] - m0);
    c01 += (p[0] - m0) * (p[1] - m1);
    c11 += (p[1] - m1) * (p[1] - m1);
  }
  EXPECT_LT(std::abs(m0), 0.02);
  EXPECT_LT(std::abs(m1), 0.02);
  EXPECT_LT(std::abs(c00 / 1e5 - 1.0), 0.05);
  EXPECT_LT(std::abs(c01 / 1e5), 0.05);
  EXPECT_LT(std::abs(c11 / 1e5 - 1.0), 0.05);
}

TEST(Gmm2d, CorrelatedCovarianceIsReproduced) {
  Gmm2dSpec s;
  s.weights = {1.0};
  s.means = {{1.0, -2.0}};
  s.covs = {{2.0, 0.8, 0.8, 1.0}};
  const GmmSample g = sample_gmm2d(s, 200000, 5);
  double c01 = 0, c11 = 0;
  for (const auto& p : g.points) {
    c01 += (p[0] - 1.0) * (p[1] + 2.0);
    c11 += (p[1] + 2.0) * (p[1] + 2.0);
  }
  EXPECT_NEAR(c01 / 2e5, 0.8, 0.03);
  EXPECT_NEAR(c11 / 2e5, 1.0, 0.03);
}

TEST(Gmm2d, ZeroWeightComponentNeverDrawn) {
  Gmm2dSpec s = Gmm2dSpec::circle(2);
  s.weights = {1.0, 0.0};
  const GmmSample g = sample_gmm2d(s, 1000, 3);
  for (int l : g.labels) EXPECT_EQ(l, 0);
}

TEST(Gmm2d, SameSeedSameSamples) {
  const auto spec = Gmm2dSpec::circle(4);
  const GmmSample a = sample_gmm2d(spec, 100, 9);
  const GmmSample b = sample_gmm2d(spec, 100, 9);
  EXPECT_EQ(a.points, b.points);
  EXPECT_EQ(a.labels, b.labels);
}

TEST(Gmm2d, InvalidSpecsRejected) {
  Gmm2dSpec s = Gmm2dSpec::circle(2);
  s.weights = {0.6, 0.6};
  EXPECT_THROW(sample_gmm2d(s, 10, 1), ContractViolation);
  s = Gmm2dSpec::circle(2);
  s.covs[1] = {1.0, 2.0, 2.0, 1.0};
  EXPECT_THROW(sample_gmm2d(s, 10, 1), ContractViolation);
  EXPECT_THROW(sample_gmm2d(Gmm2dSpec::circle(2), 0, 1), ContractViolation);
}

TEST(Gmm2d, SymmetricPairAtMidpoint) {
  Gmm2dSpec s;
  s.weights = {0.5, 0.5};
  s.means = {{1.0, 0.0}, {-1.0, 0.0}};
  s.covs = {{1, 0, 0, 1}, {1, 0, 0, 1}};
  EXPECT_NEAR(s.logpdf(0.0, 0.0), -std::log(2.0 * std::numbers::pi) - 0.5, 1e-12);
  EXPECT_NEAR(s.logpdf(0.0, 0.0), -2.3379, 1e-4);
}

TEST(Gmm2d, LogpdfFarFromModesIsFinite) {
  const auto s = Gmm2dSpec::circle(8);
  EXPECT_TRUE(std::isfinite(s.logpdf(1e3, -1e3)));
}

TEST(Gmm2d, LogpdfIntegratesToOne) {
  const auto s = Gmm2dSpec::circle(4);
  const double L = 9.0, h = 0.02;
  double acc = 0.0;
  for (double x = -L + h / 2; x < L; x += h)
    for (double y = -L + h / 2; y < L; y += h) acc += std::exp(s.logpdf(x, y));
  EXPECT_NEAR(acc * h * h, 1.0, 1e-3);
}

TEST(Rotation, OrthogonalWithUnitDeterminant) {
  for (std::size_t D : {2u, 3u, 7u, 50u}) {
    for (std::uint64_t seed = 0; seed < 6; ++seed) {
      const Matrix R = random_rotation(D, seed);
      const Matrix E = R.transpose() * R - Matrix::Identity(R.rows(), R.cols());
      EXPECT_LT(E.cwiseAbs().maxCoeff(), 1e-10);
      EXPECT_LT(std::abs(R.determinant() - 1.0), 1e-8);
    }
  }
}

TEST(Rotation, PreservesNorms) {
  const Matrix R = random_rotation(2, 4);
  Rng rng(1);
  std::normal_distribution<double> n;
  for (int i = 0; i < 20; ++i) {
    Vector v(2);
    v << n(rng), n(rng);
    EXPECT_NEAR((R * v).norm(), v.norm(), 1e-12);
  }
}

TEST(Rotation, Deterministic) { EXPECT_EQ(random_rotation(10, 3), random_rotation(10, 3)); }

TEST(Dataset, ProjectorRowsOrthonormal) {
  const auto [tr, va] = build_dataset(Gmm2dSpec::circle(4), 50, 0.02, 10, 10, 1);
  const Matrix PPt = tr.gen().Pi * tr.gen().Pi.transpose();
  EXPECT_LT((PPt - Matrix::Identity(2, 2)).cwiseAbs().maxCoeff(), 1e-10);
  EXPECT_EQ(tr.gen().Pi, va.gen().Pi);
}

TEST(Dataset, IdentityRotationWithTinyPaddingKeepsDraws) {
  const auto spec = Gmm2dSpec::circle(3);
  const auto [tr, va] = build_dataset(spec, Matrix::Identity(4, 4), 1e-12, 200, 5, 7);
  const GmmSample ref = sample_gmm2d(spec, 200, derive_seed(7, 1));
  for (std::size_t i = 0; i < 200; ++i) {
    EXPECT_NEAR(tr.X(i, 0), ref.points[i][0], 1e-9);
    EXPECT_NEAR(tr.X(i, 1), ref.points[i][1], 1e-9);
    const Vector u = tr.gen().Pi * tr.X.row(i).transpose();
    EXPECT_EQ(u(0), tr.X(i, 0));
  }
  EXPECT_EQ(tr.labels, ref.labels);
}

TEST(Dataset, ProjectorRecoversAncestorUnderRotation) {
  const auto spec = Gmm2dSpec::circle(4);
  const auto [tr, va] = build_dataset(spec, 20, 0.02, 300, 5, 2);
  const GmmSample ref = sample_gmm2d(spec, 300, derive_seed(2, 1));
  for (std::size_t i = 0; i < 300; ++i) {
    const Vector u = tr.gen().Pi * tr.X.row(i).transpose();
    EXPECT_NEAR(u(0), ref.points[i][0], 1e-10);
    EXPECT_NEAR(u(1), ref.points[i][1], 1e-10);
  }
}

TEST(Dataset, FillerHasRequestedSpread) {
  const auto [tr, va] = build_dataset(Gmm2dSpec::circle(4), 12, 0.02, 5000, 5, 3);
  const Matrix Z = tr.X * tr.gen().R;  // rows are zᵀ = (Rᵀx)ᵀ
  double ss = 0.0;
  for (Eigen::Index i = 0; i < Z.rows(); ++i)
    for (Eigen::Index j = 2; j < Z.cols(); ++j) ss += Z(i, j) * Z(i, j);
  EXPECT_NEAR(std::sqrt(ss / (5000.0 * 10.0)), 0.02, 5e-4);
}

TEST(Dataset, SplitsDiffer) {
  const auto [tr, va] = build_dataset(Gmm2dSpec::circle(4), 10, 0.02, 50, 50, 1);
  EXPECT_EQ(tr.split, Split::train);
  EXPECT_EQ(va.split, Split::val);
  EXPECT_NE(tr.X, va.X);
}

TEST(Oracle, UnitGaussianWithOneFillerDim) {
  const auto [tr, va] = build_dataset(unit_gaussian(), Matrix::Identity(3, 3), 0.02, 1, 1, 0);
  const Vector x = Vector::Zero(3);
  EXPECT_NEAR(oracle_logpdf(x, tr.gen()), -std::log(2 * std::numbers::pi) - 0.5 * std::log(2 * std::numbers::pi * 0.0004),
              1e-12);
  EXPECT_NEAR(oracle_logpdf(x, tr.gen()), 1.1552, 1e-4);
}

TEST(Oracle, FactorizesUnderRotation) {
  const auto [tr, va] = build_dataset(Gmm2dSpec::circle(4), 8, 0.02, 200, 5, 11);
  const auto& g = tr.gen();
  for (std::size_t i = 0; i < tr.size(); ++i) {
    const Vector x = tr.X.row(i).transpose();
    const Vector z = g.R.transpose() * x;
    const double filler =
        filler_logpdf(std::span<const double>(z.data() + 2, static_cast<std::size_t>(z.size() - 2)), g.sigma_pad);
    EXPECT_NEAR(oracle_logpdf(x, g), g.spec.logpdf(z(0), z(1)) + filler, 1e-10);
    EXPECT_NEAR(ancestor_logpdf(x, g), oracle_logpdf(x, g) - filler, 1e-10);
  }
}

TEST(Oracle, IdentityRotationAncestorUsesFirstTwoCoordinates) {
  const auto [tr, va] = build_dataset(Gmm2dSpec::circle(4), Matrix::Identity(5, 5), 0.02, 20, 1, 3);
  const auto all = ancestor_logpdf_all(tr);
  for (std::size_t i = 0; i < tr.size(); ++i) EXPECT_NEAR(all[i], tr.gen().spec.logpdf(tr.X(i, 0), tr.X(i, 1)), 1e-12);
}

// Volume-weighted MC over a box holding essentially all mass (D=3).
TEST(Oracle, IntegratesToOneInThreeDimensions) {
  Gmm2dSpec s = Gmm2dSpec::circle(2, 1.0, 0.3);
  const double pad = 0.3;
  const auto [tr, va] = build_dataset(s, 3, pad, 1, 1, 4);
  const auto& g = tr.gen();
  Rng rng(8);
  std::uniform_real_distribution<double> u(-1.0, 1.0);
  // Sample in the generator's own frame and rotate: the box is aligned with (u, w).
  const double a = 3.5, b = 6 * pad;
  const std::size_t n = 400000;
  double acc = 0.0;
  for (std::size_t i = 0; i < n; ++i) {
    Vector z(3);
    z << a * u(rng), a * u(rng), b * u(rng);
    acc += std::exp(oracle_logpdf(g.R * z, g));
  }
  const double vol = (2 * a) * (2 * a) * (2 * b);
  EXPECT_NEAR(acc / n * vol, 1.0, 0.02);
}

TEST(Oracle, MeanAncestorLogpdfMatchesLargeSample) {
  const auto spec = Gmm2dSpec::circle(4);
  // Negative differential entropy from 10⁶ independent draws.
  const GmmSample big = sample_gmm2d(spec, 1000000, 99);
  double ref = 0.0;
  for (const auto& p : big.points) ref += spec.logpdf(p[0], p[1]);
  ref /= 1e6;
  const auto [tr, va] = build_dataset(spec, 10, 0.02, 100000, 1, 5);
  const auto v = ancestor_logpdf_all(tr);
  double m = 0, m2 = 0;
  for (double x : v) {
    m += x;
    m2 += x * x;
  }
  m /= v.size();
  const double se = std::sqrt((m2 / v.size() - m * m) / v.size());
  EXPECT_LT(std::abs(m - ref), 3 * se + 1e-3);
}

TEST(Dataset, RejectsBadArguments) {
  EXPECT_THROW(random_rotation(1, 0), ContractViolation);
  EXPECT_THROW(build_dataset(Gmm2dSpec::circle(2), 1, 0.02, 1, 1, 0), ContractViolation);
  EXPECT_THROW(build_dataset(Gmm2dSpec::circle(2), 4, 0.0, 1, 1, 0), ContractViolation);
}

}  // namespace
