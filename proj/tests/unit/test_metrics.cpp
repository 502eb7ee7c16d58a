#include <cmath>
#include <numbers>

#include "divae/metrics.hpp"
#include "test_support.hpp"

namespace {

using namespace divae;

std::vector<double> normal_sample(std::size_t n, double mean, double sd, std::uint64_t seed) {
  Rng rng(seed);
  std::normal_distribution<double> g(mean, sd);
  std::vector<double> v(n);
  for (auto& x : v) x = g(rng);
  return v;
}

BatchLogPdf from_spec(const Gmm2dSpec& s) {
  return [s](const RowMatrix& Z) {
    std::vector<double> out(static_cast<std::size_t>(Z.rows()));
    for (Eigen::Index i = 0; i < Z.rows(); ++i) out[i] = s.logpdf(Z(i, 0), Z(i, 1));
    return out;
  };
}

// ∫ p log(p/q) on a fine grid.
double quadrature_kl(const std::function<double(double, double)>& logp, const std::function<double(double, double)>& logq,
                     double L, double h) {
  double acc = 0.0;
  for (double x = -L + h / 2; x < L; x += h)
    for (double y = -L + h / 2; y < L; y += h) {
      const double lp = logp(x, y);
      acc += std::exp(lp) * (lp - logq(x, y));
    }
  return acc * h * h;
}

TEST(Ks, SmallExample) {
  const std::vector<double> a = {1, 2, 3}, b = {2, 3, 4};
  EXPECT_NEAR(ks_two_sample(a, b), 1.0 / 3.0, 1e-15);
}

TEST(Ks, IdenticalAndDisjoint) {
  const std::vector<double> a = {0.5, -1, 2}, b = {10, 11};
  EXPECT_EQ(ks_two_sample(a, a), 0.0);
  EXPECT_EQ(ks_two_sample(a, b), 1.0);
}

TEST(Ks, TiesHandled) {
  const std::vector<double> a = {1, 1, 1, 2}, b = {1, 2, 2, 2};
  EXPECT_NEAR(ks_two_sample(a, b), 0.5, 1e-15);
}

TEST(Ks, SymmetricInRangeAndMonotoneInvariant) {
  const auto a = normal_sample(300, 0.0, 1.0, 1), b = normal_sample(200, 0.4, 1.5, 2);
  const double k = ks_two_sample(a, b);
  EXPECT_EQ(k, ks_two_sample(b, a));
  EXPECT_GE(k, 0.0);
  EXPECT_LE(k, 1.0);
  std::vector<double> ea(a), eb(b);
  for (auto& x : ea) x = std::exp(3 * x) + 7;
  for (auto& x : eb) x = std::exp(3 * x) + 7;
  EXPECT_EQ(ks_two_sample(ea, eb), k);
}

TEST(Ks, RejectsEmpty) {
  const std::vector<double> a = {1.0}, e;
  EXPECT_THROW(ks_two_sample(a, e), ContractViolation);
}

TEST(Wasserstein, UnitTranslation) {
  const auto a = normal_sample(500, 0.0, 1.0, 3);
  std::vector<double> b(a);
  for (auto& x : b) x += 1.0;
  EXPECT_NEAR(wasserstein1d(a, b), 1.0, 1e-12);
}

TEST(Wasserstein, UnequalSizesAgainstQuantileIntegral) {
  const std::vector<double> a = {0.0, 1.0}, b = {0.0, 0.5, 3.0};
  // F_a⁻¹ = 0 on (0,1/2], 1 on (1/2,1]; F_b⁻¹ = 0, 0.5, 3 on thirds.
  const double ref = (1.0 / 3) * 0 + (1.0 / 6) * 0.5 + (1.0 / 6) * 0.5 + (1.0 / 3) * 2.0;
  EXPECT_NEAR(wasserstein1d(a, b), ref, 1e-15);
}

TEST(Wasserstein, SymmetricNonNegativeTranslationEquivariant) {
  const auto a = normal_sample(301, 0.0, 1.0, 4), b = normal_sample(177, 1.0, 0.5, 5);
  const double w = wasserstein1d(a, b);
  EXPECT_NEAR(w, wasserstein1d(b, a), 1e-12);
  EXPECT_GE(w, 0.0);
  std::vector<double> sa(a), sb(b);
  for (auto& x : sa) x += 42.0;
  for (auto& x : sb) x += 42.0;
  EXPECT_NEAR(wasserstein1d(sa, sb), w, 1e-10);
  EXPECT_EQ(wasserstein1d(a, a), 0.0);
}

TEST(Entropy, UnitVarianceInTwoDimensions) {
  const std::vector<double> lv = {0.0, 0.0};
  EXPECT_NEAR(posterior_entropy(lv), std::log(2 * std::numbers::pi * std::numbers::e), 1e-10);
}

TEST(Entropy, ClosedFormMatchesMonteCarlo) {
  Rng rng(4);
  std::uniform_real_distribution<double> u(-1.5, 1.5);
  std::normal_distribution<double> g;
  for (int rep = 0; rep < 3; ++rep) {
    const std::vector<double> mu = {u(rng), u(rng), u(rng)}, lv = {u(rng), u(rng), u(rng)};
    std::vector<double> samples(50000);
    for (auto& s : samples) {
      std::vector<double> z(3);
      for (int j = 0; j < 3; ++j) z[j] = mu[j] + std::exp(0.5 * lv[j]) * g(rng);
      s = -diag_gauss_logpdf(z, mu, lv);
    }
    const McEstimate e = mc_summary(samples);
    EXPECT_LT(std::abs(e.value - posterior_entropy(lv)), 4 * e.std_error);
  }
}

TEST(CoverageKl, SelfIsZero) {
  const auto p2 = Gmm2dSpec::circle(4);
  const McEstimate e = kl_coverage(p2, from_spec(p2), 2, 20000, 3);
  EXPECT_LE(std::abs(e.value), 3 * e.std_error + 1e-12);
}

TEST(CoverageKl, MixtureMatchesQuadrature) {
  const auto p2 = Gmm2dSpec::circle(4);
  Gmm2dSpec q;
  q.weights = {0.3, 0.7};
  q.means = {{3.0, 1.0}, {-2.0, -2.0}};
  q.covs = {{4.0, 0.5, 0.5, 3.0}, {6.0, 0.0, 0.0, 6.0}};
  const McEstimate e = kl_coverage(p2, from_spec(q), 2, 100000, 7);
  const double ref = quadrature_kl([&](double x, double y) { return p2.logpdf(x, y); },
                                   [&](double x, double y) { return q.logpdf(x, y); }, 9.0, 0.02);
  EXPECT_NEAR(e.value, ref, 0.02 * ref);
  EXPECT_GT(e.value, 0.0);
}

TEST(CoverageKl, UsesModelPrior) {
  VaeConfig c;
  c.input_dim = 3;
  c.hidden_dim = 4;
  c.prior = PriorKind::gmm;
  c.prior_components = 3;
  VaeModel m(c, 5);
  const auto p2 = Gmm2dSpec::circle(4);
  const McEstimate e = kl_coverage(p2, prior_logpdf_fn(m), 2, 100000, 1);
  const auto prior = prior_logpdf_fn(m);
  auto logq = [&](double x, double y) {
    RowMatrix z(1, 2);
    z << x, y;
    return prior(z)[0];
  };
  const double ref = quadrature_kl([&](double x, double y) { return p2.logpdf(x, y); }, logq, 8.0, 0.04);
  EXPECT_NEAR(e.value, ref, 0.02 * ref);
}

TEST(CoverageKl, RejectsNonPlanarPrior) {
  const auto p2 = Gmm2dSpec::circle(2);
  EXPECT_THROW(kl_coverage(p2, from_spec(p2), 3, 100, 1), ContractViolation);
}

TEST(KlQP2, MatchesQuadrature) {
  const auto p2 = Gmm2dSpec::circle(3);
  const std::vector<double> mu = {4.0, 1.0}, lv = {-0.5, 0.2};
  Rng rng(2);
  const double mc = kl_q_p2(mu, lv, p2, 200000, rng);
  const double ref = quadrature_kl([&](double x, double y) {
    const double z[2] = {x, y};
    return diag_gauss_logpdf(z, mu, lv);
  }, [&](double x, double y) { return p2.logpdf(x, y); }, 10.0, 0.02);
  EXPECT_NEAR(mc, ref, 0.02 * std::abs(ref));
}

TEST(PosteriorKl, StandardPriorClosedForm) {
  VaeConfig c;
  c.input_dim = 3;
  c.hidden_dim = 4;
  VaeModel m(c, 1);
  RowMatrix mu(1, 2), lv(1, 2);
  mu << 1.0, 0.0;
  lv << 0.0, 0.0;
  EXPECT_NEAR(posterior_prior_kl(m, mu, lv, 1, 0)[0], 0.5, 1e-12);
}

TEST(PosteriorKl, MixtureMonteCarloIsConsistent) {
  VaeConfig c;
  c.input_dim = 3;
  c.hidden_dim = 4;
  c.prior = PriorKind::gmm;
  c.prior_components = 2;
  VaeModel m(c, 1);
  RowMatrix mu(1, 2), lv(1, 2);
  mu << 0.3, -0.2;
  lv << -1.0, -0.5;
  const double small = posterior_prior_kl(m, mu, lv, 128, 3)[0];
  const double big = posterior_prior_kl(m, mu, lv, 100000, 4)[0];
  EXPECT_NEAR(small, big, 0.15);
}

struct EvalFixture {
  VaeModel model;
  Dataset val;
  EvalFixture(PriorKind prior) {
    auto [tr, va] = build_dataset(Gmm2dSpec::circle(4), 6, 0.02, 10, 300, 2);
    val = std::move(va);
    VaeConfig c;
    c.input_dim = 6;
    c.hidden_dim = 8;
    c.prior = prior;
    c.prior_components = 4;
    model = VaeModel(c, 3);
  }
};

TEST(Evaluate, RepeatableWithSameSeed) {
  EvalFixture f(PriorKind::gmm);
  const auto ref = ancestor_logpdf_all(f.val);
  EvalOptions o;
  o.n_mc_coverage = 2000;
  o.n_mc_posterior = 8;
  PointMetrics p1, p2;
  const MetricsReport a = evaluate(f.model, f.val.X, ref, &f.val.gen().spec, o, &p1);
  const MetricsReport b = evaluate(f.model, f.val.X, ref, &f.val.gen().spec, o, &p2);
  EXPECT_EQ(p1.s, p2.s);
  EXPECT_EQ(p1.elbo, p2.elbo);
  EXPECT_EQ(a.ks, b.ks);
  EXPECT_EQ(a.coverage_kl, b.coverage_kl);
  EXPECT_EQ(a.kl_q_p2, b.kl_q_p2);
  o.seed += 1;
  const MetricsReport c = evaluate(f.model, f.val.X, ref, &f.val.gen().spec, o);
  EXPECT_NE(a.s.mean, c.s.mean);
}

TEST(Evaluate, BatchSizeDoesNotChangeResults) {
  EvalFixture f(PriorKind::standard);
  const auto ref = ancestor_logpdf_all(f.val);
  EvalOptions o;
  o.batch = 7;
  const MetricsReport a = evaluate(f.model, f.val.X, ref, nullptr, o);
  o.batch = 1024;
  const MetricsReport b = evaluate(f.model, f.val.X, ref, nullptr, o);
  EXPECT_EQ(a.s.mean, b.s.mean);
  EXPECT_EQ(a.elbo.mean, b.elbo.mean);
}

TEST(Evaluate, FieldsConsistentWithPointVectors) {
  EvalFixture f(PriorKind::gmm);
  const auto ref = ancestor_logpdf_all(f.val);
  EvalOptions o;
  o.n_mc_coverage = 1000;
  o.n_mc_posterior = 4;
  PointMetrics pm;
  const MetricsReport r = evaluate(f.model, f.val.X, ref, &f.val.gen().spec, o, &pm);
  EXPECT_EQ(r.n, 300u);
  EXPECT_EQ(r.ks, ks_two_sample(pm.s, ref));
  EXPECT_EQ(r.w, wasserstein1d(pm.s, ref));
  EXPECT_NEAR(r.s.mean, std::accumulate(pm.s.begin(), pm.s.end(), 0.0) / 300, 1e-12);
  EXPECT_GE(r.ks, 0.0);
  EXPECT_LE(r.ks, 1.0);
  EXPECT_GE(r.w, 0.0);
  EXPECT_TRUE(std::isfinite(r.coverage_kl));
  EXPECT_EQ(r.model_hash, model_hash(f.model));
  // s is the prior log-density at the sampled latent.
  const auto prior = prior_logpdf_fn(f.model);
  const auto s2 = prior(pm.z);
  for (std::size_t i = 0; i < 300; ++i) EXPECT_NEAR(pm.s[i], s2[i], 1e-12);
}

TEST(Evaluate, CoverageOnlyForMixturePrior) {
  EvalFixture f(PriorKind::standard);
  const auto ref = ancestor_logpdf_all(f.val);
  const MetricsReport r = evaluate(f.model, f.val.X, ref, &f.val.gen().spec, EvalOptions{});
  EXPECT_TRUE(std::isnan(r.coverage_kl));
  EXPECT_TRUE(std::isfinite(r.kl_q_p2));
}

TEST(Ood, ShiftsAreDifferences) {
  MetricsReport a, b;
  a.elbo.mean = 10;
  b.elbo.mean = 4;
  a.s.mean = -2;
  b.s.mean = -5;
  a.kl_prior = 1;
  b.kl_prior = 3;
  a.entropy = 0.5;
  b.entropy = 0.25;
  const OodShifts s = ood_shifts(a, b);
  EXPECT_EQ(s.d_elbo, -6);
  EXPECT_EQ(s.d_s, -3);
  EXPECT_EQ(s.d_kl, 2);
  EXPECT_EQ(s.d_entropy, -0.25);
  b.model_hash = 1;
  EXPECT_THROW(ood_shifts(a, b), ContractViolation);
}

TEST(MeanStd, PopulationStd) {
  const std::vector<double> v = {1, 2, 3, 4};
  const Stat s = mean_std(v);
  EXPECT_EQ(s.mean, 2.5);
  EXPECT_NEAR(s.std, std::sqrt(1.25), 1e-15);
}

}  // namespace
