#include <cmath>
#include <numbers>

#include "divae/vae.hpp"
#include "test_support.hpp"

namespace {

using namespace divae;
using namespace divae::testing;

VaeConfig small_config(PriorKind prior, DecoderKind dec = DecoderKind::gaussian) {
  VaeConfig c;
  c.input_dim = 5;
  c.hidden_dim = 6;
  c.latent_dim = 2;
  c.prior = prior;
  c.prior_components = 3;
  c.decoder = dec;
  // A larger σ_x keeps the loss scale moderate for finite differences.
  c.sigma_x = 0.5;
  return c;
}

TEST(VaeUnitValues, StandardNormalLogpdfAtOrigin) {
  VaeModel m(small_config(PriorKind::standard), 1);
  const Var s = m.prior_logpdf(ad::constant(Tensor::matrix(1, 2, {0.0, 0.0})));
  EXPECT_NEAR(s.item(), -std::log(2.0 * std::numbers::pi), 1e-10);
}

TEST(VaeUnitValues, KlOfUnitShiftedGaussian) {
  Posterior p{ad::constant(Tensor::matrix(1, 1, {1.0})), ad::constant(Tensor::matrix(1, 1, {0.0}))};
  EXPECT_NEAR(VaeModel::kl_standard(p).item(), 0.5, 1e-10);
}

TEST(VaeUnitValues, GaussianDecoderConstantPerDim) {
  VaeConfig c = small_config(PriorKind::standard);
  c.input_dim = 1;
  c.sigma_x = 0.02;
  VaeModel m(c, 1);
  // With x equal to the decoded mean the quadratic term vanishes.
  const Var z = ad::constant(Tensor::matrix(1, 2, {0.3, -0.1}));
  const Tensor xhat = m.decode(z).value();
  const double ll = m.decoder_loglik(ad::constant(xhat), z).item();
  EXPECT_NEAR(ll, -0.5 * std::log(2.0 * std::numbers::pi * 0.02 * 0.02), 1e-10);
  EXPECT_NEAR(ll, 2.9931, 5e-5);
}

TEST(Vae, PosteriorLogpdfMatchesClosedForm) {
  const Tensor mu = random_tensor({3, 2}, 1);
  const Tensor lv = random_tensor({3, 2}, 2);
  const Tensor z = random_tensor({3, 2}, 3);
  Posterior p{ad::constant(mu), ad::constant(lv)};
  const Tensor out = VaeModel::posterior_logpdf(ad::constant(z), p).value();
  for (std::size_t b = 0; b < 3; ++b) {
    double ref = 0.0;
    for (std::size_t j = 0; j < 2; ++j) {
      const double var = std::exp(lv.at(b, j));
      const double e = z.at(b, j) - mu.at(b, j);
      ref += -0.5 * std::log(2.0 * std::numbers::pi * var) - 0.5 * e * e / var;
    }
    EXPECT_NEAR(out[b], ref, 1e-12);
  }
}

TEST(Vae, GmmPriorMatchesMixtureFormula) {
  VaeModel m(small_config(PriorKind::gmm), 5);
  const Tensor logits = m.params().at("prior.logits").value();
  const Tensor means = m.params().at("prior.means").value();
  const Tensor ls = m.params().at("prior.log_scales").value();
  const Tensor z = random_tensor({4, 2}, 9, -2, 2);
  const Tensor out = m.prior_logpdf(ad::constant(z)).value();
  for (std::size_t b = 0; b < 4; ++b) {
    double norm = 0.0;
    for (std::size_t k = 0; k < 3; ++k) norm += std::exp(logits[k]);
    double p = 0.0;
    for (std::size_t k = 0; k < 3; ++k) {
      double comp = 1.0;
      for (std::size_t j = 0; j < 2; ++j) {
        const double s = std::exp(ls.at(k, j));
        const double t = (z.at(b, j) - means.at(k, j)) / s;
        comp *= std::exp(-0.5 * t * t) / (s * std::sqrt(2.0 * std::numbers::pi));
      }
      p += std::exp(logits[k]) / norm * comp;
    }
    EXPECT_NEAR(out[b], std::log(p), 1e-12);
  }
}

TEST(Vae, VampPriorIsUniformMixtureOfPseudoPosteriors) {
  VaeModel m(small_config(PriorKind::vamp), 5);
  const Var pseudo = m.params().at("prior.pseudo_inputs");
  const Posterior pp = m.encode(pseudo);
  const Tensor z = random_tensor({2, 2}, 4);
  const Tensor out = m.prior_logpdf(ad::constant(z)).value();
  for (std::size_t b = 0; b < 2; ++b) {
    double p = 0.0;
    for (std::size_t k = 0; k < 3; ++k) {
      Posterior one{ad::constant(Tensor::matrix(1, 2, {pp.mu.value().at(k, 0), pp.mu.value().at(k, 1)})),
                    ad::constant(Tensor::matrix(1, 2, {pp.logvar.value().at(k, 0), pp.logvar.value().at(k, 1)}))};
      p += std::exp(VaeModel::posterior_logpdf(ad::constant(Tensor::matrix(1, 2, {z.at(b, 0), z.at(b, 1)})), one).item()) / 3.0;
    }
    EXPECT_NEAR(out[b], std::log(p), 1e-12);
  }
}

TEST(Vae, KlStandardMatchesMonteCarlo) {
  Posterior p{ad::constant(Tensor::matrix(1, 2, {0.7, -0.3})), ad::constant(Tensor::matrix(1, 2, {-0.4, 0.5}))};
  VaeModel m(small_config(PriorKind::standard), 1);
  Rng rng(3);
  const std::size_t n = 200000;
  double acc = 0.0;
  for (std::size_t i = 0; i < n; ++i) {
    const Var z = VaeModel::reparameterize(p, gaussian_noise(1, 2, rng));
    acc += VaeModel::posterior_logpdf(z, p).item() - m.prior_logpdf(z).item();
  }
  EXPECT_NEAR(acc / n, VaeModel::kl_standard(p).item(), 0.01);
}

TEST(Vae, LogvarIsClamped) {
  VaeConfig c = small_config(PriorKind::standard);
  c.logvar_clamp = 0.1;
  VaeModel m(c, 1);
  const Posterior p = m.encode(ad::constant(random_tensor({8, 5}, 2, -100, 100)));
  for (double v : p.logvar.value().values()) {
    EXPECT_LE(v, 0.1);
    EXPECT_GE(v, -0.1);
  }
}

TEST(Vae, BernoulliRejectsTargetsOutsideUnitInterval) {
  VaeModel m(small_config(PriorKind::standard, DecoderKind::bernoulli), 1);
  const Var z = ad::constant(Tensor({1, 2}, 0.0));
  EXPECT_THROW(m.decoder_loglik(ad::constant(Tensor({1, 5}, 1.5)), z), ContractViolation);
  EXPECT_NO_THROW(m.decoder_loglik(ad::constant(Tensor({1, 5}, 0.25)), z));
}

TEST(Vae, InputDimensionMismatchThrows) {
  VaeModel m(small_config(PriorKind::standard), 1);
  EXPECT_THROW(m.decoder_loglik(ad::constant(Tensor({1, 4}, 0.0)), ad::constant(Tensor({1, 2}, 0.0))),
               ContractViolation);
}

TEST(Vae, CloneIsIndependent) {
  VaeModel m(small_config(PriorKind::gmm), 1);
  VaeModel c = m.clone();
  Var w = c.params().at("enc.fc1.w");
  w.mutable_value()[0] += 1.0;
  EXPECT_NE(m.params().at("enc.fc1.w").value()[0], w.value()[0]);
}

class NegElboGradient : public ::testing::TestWithParam<std::tuple<PriorKind, DecoderKind>> {};

TEST_P(NegElboGradient, MatchesFiniteDifferences) {
  const auto [prior, dec] = GetParam();
  VaeModel m(small_config(prior, dec), 11);
  Tensor xt = random_tensor({4, 5}, 12, dec == DecoderKind::bernoulli ? 0.05 : -1.0, dec == DecoderKind::bernoulli ? 0.95 : 1.0);
  Rng rng(13);
  const Tensor noise = gaussian_noise(4, 2, rng);
  const Var x = ad::constant(xt);
  const GradCheck r = check_gradients(m.params().vars(), [&] { return ad::neg(ad::mean(m.elbo_point(x, noise))); });
  EXPECT_LT(r.max_rel_err, 1e-4);
  EXPECT_GT(r.coords, 50u);
}

INSTANTIATE_TEST_SUITE_P(AllPriors, NegElboGradient,
                         ::testing::Combine(::testing::Values(PriorKind::standard, PriorKind::gmm, PriorKind::vamp),
                                            ::testing::Values(DecoderKind::gaussian, DecoderKind::bernoulli)));

TEST(Vae, ParseNames) {
  EXPECT_EQ(parse_prior("gmm"), PriorKind::gmm);
  EXPECT_EQ(to_string(PriorKind::vamp), "vamp");
  EXPECT_THROW(parse_prior("flowprior"), ContractViolation);
}

TEST(VaeProperties, MixturePriorIntegratesToOne) {
  for (PriorKind prior : {PriorKind::gmm, PriorKind::vamp}) {
    VaeModel m(small_config(prior), 21);
    ad::NoGradGuard g;
    const double L = 8.0, h = 0.04;
    std::vector<double> pts;
    for (double x = -L + h / 2; x < L; x += h)
      for (double y = -L + h / 2; y < L; y += h) {
        pts.push_back(x);
        pts.push_back(y);
      }
    const std::size_t n = pts.size() / 2;
    const Tensor lp = m.prior_logpdf(ad::constant(Tensor({n, 2}, pts))).value();
    double acc = 0.0;
    for (double v : lp.values()) acc += std::exp(v);
    EXPECT_NEAR(acc * h * h, 1.0, 0.02) << to_string(prior);
  }
}

// Linear-Gaussian model with d=2: log p(x) by quadrature over z bounds the ELBO.
TEST(VaeProperties, ElboBelowQuadratureLogLikelihood) {
  VaeConfig c = small_config(PriorKind::standard);
  c.input_dim = 3;
  c.activation = Activation::identity;
  VaeModel m(c, 4);
  ad::NoGradGuard g;
  const Tensor x = random_tensor({1, 3}, 5);
  const double L = 7.0, h = 0.02;
  std::vector<double> zs;
  for (double a = -L + h / 2; a < L; a += h)
    for (double b = -L + h / 2; b < L; b += h) {
      zs.push_back(a);
      zs.push_back(b);
    }
  const std::size_t n = zs.size() / 2;
  const Var Z = ad::constant(Tensor({n, 2}, zs));
  Tensor xs({n, 3});
  for (std::size_t i = 0; i < n; ++i)
    for (std::size_t j = 0; j < 3; ++j) xs[i * 3 + j] = x[j];
  const Tensor joint = ad::add(m.decoder_loglik(ad::constant(xs), Z), m.prior_logpdf(Z)).value();
  double mx = -1e300;
  for (double v : joint.values()) mx = std::max(mx, v);
  double acc = 0.0;
  for (double v : joint.values()) acc += std::exp(v - mx);
  const double logpx = mx + std::log(acc * h * h);

  Rng rng(6);
  std::vector<double> el;
  for (int r = 0; r < 20000; ++r) el.push_back(m.elbo_point(ad::constant(x), gaussian_noise(1, 2, rng)).item());
  double mean = 0, var = 0;
  for (double v : el) mean += v / el.size();
  for (double v : el) var += (v - mean) * (v - mean) / (el.size() - 1);
  EXPECT_LE(mean, logpx + 3 * std::sqrt(var / el.size()));
}

}  // namespace
