#pragma once

#include <algorithm>
#include <cmath>
#include <cstdint>
#include <functional>
#include <limits>
#include <numeric>
#include <optional>
#include <span>
#include <string>
#include <vector>

#include "divae/synthgen.hpp"
#include "divae/vae.hpp"

namespace divae {

// ---------------------------------------------------------------------------
// Distribution distances between 1D samples

/// Two-sample Kolmogorov–Smirnov statistic sup |F_a − F_b| (right-continuous ECDFs).
inline double ks_two_sample(std::span<const double> a, std::span<const double> b) {
  require(!a.empty() && !b.empty(), "ks_two_sample: empty sample");
  std::vector<double> sa(a.begin(), a.end()), sb(b.begin(), b.end());
  std::sort(sa.begin(), sa.end());
  std::sort(sb.begin(), sb.end());
  const double na = static_cast<double>(sa.size()), nb = static_cast<double>(sb.size());
  std::size_t i = 0, j = 0;
  double best = 0.0;
  while (i < sa.size() || j < sb.size()) {
    double x;
    if (j >= sb.size()) x = sa[i];
    else if (i >= sa.size()) x = sb[j];
    else x = std::min(sa[i], sb[j]);
    while (i < sa.size() && sa[i] <= x) ++i;
    while (j < sb.size() && sb[j] <= x) ++j;
    best = std::max(best, std::abs(static_cast<double>(i) / na - static_cast<double>(j) / nb));
  }
  return best;
}

/// 1-Wasserstein distance ∫₀¹ |F_a⁻¹(t) − F_b⁻¹(t)| dt; sizes may differ.
inline double wasserstein1d(std::span<const double> a, std::span<const double> b) {
  require(!a.empty() && !b.empty(), "wasserstein1d: empty sample");
  std::vector<double> sa(a.begin(), a.end()), sb(b.begin(), b.end());
  std::sort(sa.begin(), sa.end());
  std::sort(sb.begin(), sb.end());
  const std::size_t na = sa.size(), nb = sb.size();
  // Walk the merged quantile breakpoints k/na and l/nb in exact integer arithmetic.
  std::size_t i = 0, j = 0;
  std::uint64_t pos = 0;  // current t scaled by na*nb
  const std::uint64_t total = static_cast<std::uint64_t>(na) * nb;
  double acc = 0.0;
  while (pos < total) {
    const std::uint64_t next_a = static_cast<std::uint64_t>(i + 1) * nb;
    const std::uint64_t next_b = static_cast<std::uint64_t>(j + 1) * na;
    const std::uint64_t next = std::min(next_a, next_b);
    acc += std::abs(sa[i] - sb[j]) * static_cast<double>(next - pos);
    pos = next;
    if (next == next_a) ++i;
    if (next == next_b) ++j;
  }
  return acc / static_cast<double>(total);
}

// ---------------------------------------------------------------------------
// Posterior quantities

/// Closed-form entropy of N(μ, diag(exp(logvar))).
inline double posterior_entropy(std::span<const double> logvar) {
  const double d = static_cast<double>(logvar.size());
  double s = 0.0;
  for (double lv : logvar) s += 0.5 * lv;
  return 0.5 * d * (1.0 + kLog2Pi) + s;
}

inline double diag_gauss_logpdf(std::span<const double> z, std::span<const double> mu, std::span<const double> logvar) {
  double acc = 0.0;
  for (std::size_t j = 0; j < z.size(); ++j) {
    const double t = (z[j] - mu[j]) * std::exp(-0.5 * logvar[j]);
    acc += -0.5 * kLog2Pi - 0.5 * logvar[j] - 0.5 * t * t;
  }
  return acc;
}

/// Monte-Carlo estimate with its standard error.
struct McEstimate {
  double value = 0.0;
  double std_error = 0.0;
};

inline McEstimate mc_summary(std::span<const double> samples) {
  const double n = static_cast<double>(samples.size());
  const double m = std::accumulate(samples.begin(), samples.end(), 0.0) / n;
  double v = 0.0;
  for (double x : samples) v += (x - m) * (x - m);
  v = samples.size() > 1 ? v / (n - 1.0) : 0.0;
  return {m, std::sqrt(v / n)};
}

/// Batched log-density over rows of a [n,d] matrix.
using BatchLogPdf = std::function<std::vector<double>(const RowMatrix&)>;

/// log p_Z for rows of Z using the model's prior, without recording a tape.
inline BatchLogPdf prior_logpdf_fn(const VaeModel& model) {
  return [&model](const RowMatrix& Z) {
    ad::NoGradGuard guard;
    std::vector<double> out;
    out.reserve(static_cast<std::size_t>(Z.rows()));
    const std::size_t d = static_cast<std::size_t>(Z.cols());
    constexpr Eigen::Index chunk = 4096;
    for (Eigen::Index r0 = 0; r0 < Z.rows(); r0 += chunk) {
      const Eigen::Index n = std::min(chunk, Z.rows() - r0);
      Tensor t({static_cast<std::size_t>(n), d});
      std::copy(Z.data() + r0 * Z.cols(), Z.data() + (r0 + n) * Z.cols(), t.values().begin());
      const Var s = model.prior_logpdf(ad::constant(std::move(t)));
      out.insert(out.end(), s.value().values().begin(), s.value().values().end());
    }
    return out;
  };
}

/// KL(p₂ ‖ p_Z) by Monte Carlo with u ~ p₂.
inline McEstimate kl_coverage(const Gmm2dSpec& p2, const BatchLogPdf& prior_logpdf, std::size_t latent_dim,
                              std::size_t n_mc, std::uint64_t seed) {
  require(latent_dim == 2, "kl_coverage: prior must be two-dimensional");
  require(n_mc >= 2, "kl_coverage: need at least two samples");
  const GmmSample s = sample_gmm2d(p2, n_mc, seed);
  RowMatrix U(static_cast<Eigen::Index>(n_mc), 2);
  for (std::size_t i = 0; i < n_mc; ++i) {
    U(static_cast<Eigen::Index>(i), 0) = s.points[i][0];
    U(static_cast<Eigen::Index>(i), 1) = s.points[i][1];
  }
  const auto lp = prior_logpdf(U);
  std::vector<double> diff(n_mc);
  for (std::size_t i = 0; i < n_mc; ++i) diff[i] = p2.logpdf(s.points[i][0], s.points[i][1]) - lp[i];
  return mc_summary(diff);
}

/// KL(q ‖ p₂) for one diagonal posterior in ℝ² by Monte Carlo.
inline double kl_q_p2(std::span<const double> mu, std::span<const double> logvar, const Gmm2dSpec& p2,
                      std::size_t n_mc, Rng& rng) {
  require(mu.size() == 2 && logvar.size() == 2, "kl_q_p2: posterior must be two-dimensional");
  std::normal_distribution<double> normal(0.0, 1.0);
  double acc = 0.0;
  std::array<double, 2> z{};
  for (std::size_t m = 0; m < n_mc; ++m) {
    for (std::size_t j = 0; j < 2; ++j) z[j] = mu[j] + std::exp(0.5 * logvar[j]) * normal(rng);
    acc += diag_gauss_logpdf(z, mu, logvar) - p2.logpdf(z[0], z[1]);
  }
  return acc / static_cast<double>(n_mc);
}

// ---------------------------------------------------------------------------
// Full evaluation

struct EvalOptions {
  std::uint64_t seed = 12345;
  std::size_t n_mc_coverage = 100000;
  std::size_t n_mc_posterior = 128;
  std::size_t batch = 1024;
};

/// Per-point vectors behind a MetricsReport.
struct PointMetrics {
  RowMatrix mu;
  RowMatrix logvar;
  RowMatrix z;
  std::vector<double> elbo;
  std::vector<double> s;
  std::vector<double> kl_prior;   // KL(q(z|x) ‖ p_Z)
  std::vector<double> entropy;
  std::vector<double> kl_q_p2;    // empty unless a 2D generator is supplied
};

struct Stat {
  double mean = 0.0;
  double std = 0.0;
};

inline Stat mean_std(std::span<const double> v) {
  if (v.empty()) return {std::numeric_limits<double>::quiet_NaN(), std::numeric_limits<double>::quiet_NaN()};
  const double n = static_cast<double>(v.size());
  const double m = std::accumulate(v.begin(), v.end(), 0.0) / n;
  double s = 0.0;
  for (double x : v) s += (x - m) * (x - m);
  return {m, std::sqrt(s / n)};
}

struct MetricsReport {
  std::size_t n = 0;
  Stat elbo;
  Stat s;
  Stat reference;
  double ks = 0.0;
  double w = 0.0;
  double coverage_kl = std::numeric_limits<double>::quiet_NaN();
  double coverage_kl_se = std::numeric_limits<double>::quiet_NaN();
  double kl_q_p2 = std::numeric_limits<double>::quiet_NaN();
  double entropy = 0.0;
  double kl_prior = 0.0;
  std::uint64_t model_hash = 0;
  std::uint64_t eval_seed = 0;
  std::size_t n_mc_coverage = 0;
  std::size_t n_mc_posterior = 0;
};

/// Per-point posterior KL to the prior: closed form for N(0,I), MC otherwise.
inline std::vector<double> posterior_prior_kl(const VaeModel& model, const RowMatrix& mu, const RowMatrix& logvar,
                                              std::size_t n_mc, std::uint64_t seed) {
  const auto N = static_cast<std::size_t>(mu.rows());
  const auto d = static_cast<std::size_t>(mu.cols());
  std::vector<double> kl(N, 0.0);
  if (model.config().prior == PriorKind::standard) {
    for (std::size_t i = 0; i < N; ++i) {
      double acc = 0.0;
      for (std::size_t j = 0; j < d; ++j) {
        const double m = mu(static_cast<Eigen::Index>(i), static_cast<Eigen::Index>(j));
        const double lv = logvar(static_cast<Eigen::Index>(i), static_cast<Eigen::Index>(j));
        acc += m * m + std::exp(lv) - 1.0 - lv;
      }
      kl[i] = 0.5 * acc;
    }
    return kl;
  }
  const auto prior = prior_logpdf_fn(model);
  Rng rng(seed);
  std::normal_distribution<double> normal(0.0, 1.0);
  RowMatrix Z(mu.rows(), mu.cols());
  for (std::size_t m = 0; m < n_mc; ++m) {
    for (Eigen::Index i = 0; i < Z.rows(); ++i)
      for (Eigen::Index j = 0; j < Z.cols(); ++j) Z(i, j) = mu(i, j) + std::exp(0.5 * logvar(i, j)) * normal(rng);
    const auto lp = prior(Z);
    for (std::size_t i = 0; i < N; ++i) {
      const auto r = static_cast<Eigen::Index>(i);
      const std::span<const double> zi(Z.data() + r * Z.cols(), d);
      const std::span<const double> mi(mu.data() + r * mu.cols(), d);
      const std::span<const double> li(logvar.data() + r * logvar.cols(), d);
      kl[i] += diag_gauss_logpdf(zi, mi, li) - lp[i];
    }
  }
  for (auto& v : kl) v /= static_cast<double>(n_mc);
  return kl;
}

inline std::uint64_t fnv1a64(const void* data, std::size_t n, std::uint64_t h = 0xcbf29ce484222325ULL) {
  const auto* p = static_cast<const unsigned char*>(data);
  for (std::size_t i = 0; i < n; ++i) {
    h ^= p[i];
    h *= 0x100000001b3ULL;
  }
  return h;
}

inline std::uint64_t model_hash(const VaeModel& model) {
  std::uint64_t h = 0xcbf29ce484222325ULL;
  for (const auto& [name, v] : model.params().items()) {
    h = fnv1a64(name.data(), name.size(), h);
    h = fnv1a64(v.value().values().data(), v.value().size() * sizeof(double), h);
  }
  return h;
}

/// Evaluates a trained model on X. `reference` is the log-density vector the
/// s-values are compared against (oracle ancestor densities or teacher ρ);
/// `p2` enables the generator-based metrics when the latent space is 2D.
inline MetricsReport evaluate(const VaeModel& model, const RowMatrix& X, std::span<const double> reference,
                              const Gmm2dSpec* p2, const EvalOptions& opt, PointMetrics* points = nullptr) {
  ad::NoGradGuard guard;
  const auto N = static_cast<std::size_t>(X.rows());
  const std::size_t d = model.latent_dim();
  require(N > 0, "evaluate: empty dataset");

  PointMetrics pm;
  pm.mu.resize(X.rows(), static_cast<Eigen::Index>(d));
  pm.logvar.resize(X.rows(), static_cast<Eigen::Index>(d));
  pm.z.resize(X.rows(), static_cast<Eigen::Index>(d));
  pm.elbo.resize(N);
  pm.s.resize(N);
  std::vector<double> loglik(N);

  Rng noise_rng(derive_seed(opt.seed, 1));
  for (std::size_t b0 = 0; b0 < N; b0 += opt.batch) {
    const std::size_t n = std::min(opt.batch, N - b0);
    std::vector<std::size_t> idx(n);
    std::iota(idx.begin(), idx.end(), b0);
    const Var x = ad::constant(gather_rows(X, idx));
    const Posterior post = model.encode(x);
    const Tensor noise = gaussian_noise(n, d, noise_rng);
    const Var z = VaeModel::reparameterize(post, noise);
    const Var ll = model.decoder_loglik(x, z);
    const Var s = model.prior_logpdf(z);
    for (std::size_t i = 0; i < n; ++i) {
      for (std::size_t j = 0; j < d; ++j) {
        const auto r = static_cast<Eigen::Index>(b0 + i);
        const auto c = static_cast<Eigen::Index>(j);
        pm.mu(r, c) = post.mu.value()[i * d + j];
        pm.logvar(r, c) = post.logvar.value()[i * d + j];
        pm.z(r, c) = z.value()[i * d + j];
      }
      loglik[b0 + i] = ll.value()[i];
      pm.s[b0 + i] = s.value()[i];
    }
  }

  pm.kl_prior = posterior_prior_kl(model, pm.mu, pm.logvar, opt.n_mc_posterior, derive_seed(opt.seed, 2));
  pm.entropy.resize(N);
  for (std::size_t i = 0; i < N; ++i) {
    pm.elbo[i] = loglik[i] - pm.kl_prior[i];
    pm.entropy[i] = posterior_entropy(std::span<const double>(pm.logvar.data() + i * d, d));
  }

  MetricsReport r;
  r.n = N;
  r.elbo = mean_std(pm.elbo);
  r.s = mean_std(pm.s);
  r.reference = mean_std(reference);
  r.ks = ks_two_sample(pm.s, reference);
  r.w = wasserstein1d(pm.s, reference);
  r.entropy = mean_std(pm.entropy).mean;
  r.kl_prior = mean_std(pm.kl_prior).mean;
  r.model_hash = model_hash(model);
  r.eval_seed = opt.seed;
  r.n_mc_posterior = opt.n_mc_posterior;

  if (p2 != nullptr && d == 2) {
    Rng rng(derive_seed(opt.seed, 3));
    pm.kl_q_p2.resize(N);
    for (std::size_t i = 0; i < N; ++i) {
      pm.kl_q_p2[i] = kl_q_p2(std::span<const double>(pm.mu.data() + i * d, d),
                              std::span<const double>(pm.logvar.data() + i * d, d), *p2, opt.n_mc_posterior, rng);
    }
    r.kl_q_p2 = mean_std(pm.kl_q_p2).mean;
    if (model.config().prior == PriorKind::gmm) {
      const McEstimate c = kl_coverage(*p2, prior_logpdf_fn(model), d, opt.n_mc_coverage, derive_seed(opt.seed, 4));
      r.coverage_kl = c.value;
      r.coverage_kl_se = c.std_error;
      r.n_mc_coverage = opt.n_mc_coverage;
    }
  }
  if (points != nullptr) *points = std::move(pm);
  return r;
}

/// OOD-minus-in-distribution shifts of the mean metrics.
struct OodShifts {
  double d_elbo = 0.0;
  double d_s = 0.0;
  double d_kl = 0.0;
  double d_entropy = 0.0;
};

inline OodShifts ood_shifts(const MetricsReport& in, const MetricsReport& ood) {
  require(in.model_hash == ood.model_hash, "ood_shifts: reports come from different models");
  require(in.n_mc_posterior == ood.n_mc_posterior, "ood_shifts: reports use different MC budgets");
  return {ood.elbo.mean - in.elbo.mean, ood.s.mean - in.s.mean, ood.kl_prior - in.kl_prior,
          ood.entropy - in.entropy};
}

}  // namespace divae
