#pragma once

#include <array>
#include <cmath>
#include <cstdint>
#include <limits>
#include <numbers>
#include <span>
#include <optional>
#include <string>
#include <utility>
#include <vector>

#include "divae/common.hpp"
#include "divae/errors.hpp"

namespace divae {

/// Two-dimensional Gaussian mixture p₂(u) with full covariances.
struct Gmm2dSpec {
  std::vector<double> weights;
  std::vector<std::array<double, 2>> means;
  std::vector<std::array<double, 4>> covs;  // row-major 2x2

  std::size_t k() const noexcept { return weights.size(); }

  /// k equal-weight components with means evenly spaced on a circle and
  /// isotropic covariance `var`·I.
  static Gmm2dSpec circle(std::size_t k, double radius = 5.0, double var = 0.4) {
    require(k >= 1, "Gmm2dSpec::circle: k must be >= 1");
    Gmm2dSpec s;
    for (std::size_t i = 0; i < k; ++i) {
      const double a = 2.0 * std::numbers::pi * static_cast<double>(i) / static_cast<double>(k);
      s.weights.push_back(1.0 / static_cast<double>(k));
      s.means.push_back({radius * std::cos(a), radius * std::sin(a)});
      s.covs.push_back({var, 0.0, 0.0, var});
    }
    return s;
  }

  void validate() const {
    require(!weights.empty(), "Gmm2dSpec: no components");
    require(means.size() == k() && covs.size() == k(), "Gmm2dSpec: component arrays disagree in length");
    double total = 0.0;
    for (double w : weights) {
      require(w >= 0.0 && std::isfinite(w), "Gmm2dSpec: weights must be finite and non-negative");
      total += w;
    }
    require(std::abs(total - 1.0) <= 1e-12, "Gmm2dSpec: weights must sum to 1");
    for (const auto& c : covs) {
      require(c[1] == c[2], "Gmm2dSpec: covariance must be symmetric");
      const double det = c[0] * c[3] - c[1] * c[2];
      require(c[0] > 0.0 && det > 0.0, "Gmm2dSpec: covariance must be positive definite");
    }
  }

  /// log N(u; μ_c, Σ_c) for one component.
  double component_logpdf(std::size_t c, double u0, double u1) const {
    const auto& S = covs[c];
    const double det = S[0] * S[3] - S[1] * S[2];
    const double d0 = u0 - means[c][0], d1 = u1 - means[c][1];
    const double q = (S[3] * d0 * d0 - 2.0 * S[1] * d0 * d1 + S[0] * d1 * d1) / det;
    return -std::log(2.0 * std::numbers::pi) - 0.5 * std::log(det) - 0.5 * q;
  }

  /// log p₂(u), evaluated with log-sum-exp over components.
  double logpdf(double u0, double u1) const {
    double mx = -std::numeric_limits<double>::infinity();
    std::array<double, 64> small{};
    std::vector<double> big;
    double* terms = small.data();
    if (k() > small.size()) {
      big.resize(k());
      terms = big.data();
    }
    for (std::size_t c = 0; c < k(); ++c) {
      terms[c] = weights[c] > 0.0 ? std::log(weights[c]) + component_logpdf(c, u0, u1)
                                  : -std::numeric_limits<double>::infinity();
      mx = std::max(mx, terms[c]);
    }
    double s = 0.0;
    for (std::size_t c = 0; c < k(); ++c) s += std::exp(terms[c] - mx);
    return mx + std::log(s);
  }

  friend bool operator==(const Gmm2dSpec&, const Gmm2dSpec&) = default;
};

struct GmmSample {
  std::vector<std::array<double, 2>> points;
  std::vector<int> labels;
};

/// Draws n points: a component by weight, then a Gaussian draw from it.
inline GmmSample sample_gmm2d(const Gmm2dSpec& spec, std::size_t n, std::uint64_t seed) {
  spec.validate();
  require(n >= 1, "sample_gmm2d: n must be >= 1");
  Rng rng(seed);
  std::discrete_distribution<int> pick(spec.weights.begin(), spec.weights.end());
  std::normal_distribution<double> normal(0.0, 1.0);
  GmmSample out;
  out.points.reserve(n);
  out.labels.reserve(n);
  for (std::size_t i = 0; i < n; ++i) {
    const int c = pick(rng);
    const auto& S = spec.covs[static_cast<std::size_t>(c)];
    // Cholesky of the 2x2 covariance.
    const double l00 = std::sqrt(S[0]);
    const double l10 = S[2] / l00;
    const double l11 = std::sqrt(S[3] - l10 * l10);
    const double e0 = normal(rng), e1 = normal(rng);
    const auto& mu = spec.means[static_cast<std::size_t>(c)];
    out.points.push_back({mu[0] + l00 * e0, mu[1] + l10 * e0 + l11 * e1});
    out.labels.push_back(c);
  }
  return out;
}

/// Haar-random rotation in SO(D) via QR of a Gaussian matrix.
inline Matrix random_rotation(std::size_t D, std::uint64_t seed) {
  require(D >= 2, "random_rotation: D must be >= 2");
  Rng rng(seed);
  std::normal_distribution<double> normal(0.0, 1.0);
  const auto n = static_cast<Eigen::Index>(D);
  Matrix A(n, n);
  for (Eigen::Index i = 0; i < n; ++i)
    for (Eigen::Index j = 0; j < n; ++j) A(i, j) = normal(rng);
  Eigen::HouseholderQR<Matrix> qr(A);
  Matrix Q = qr.householderQ() * Matrix::Identity(n, n);
  const Matrix Rf = qr.matrixQR().triangularView<Eigen::Upper>();
  for (Eigen::Index j = 0; j < n; ++j) {
    if (Rf(j, j) < 0.0) Q.col(j) *= -1.0;
  }
  if (Q.determinant() < 0.0) Q.col(0) *= -1.0;
  return Q;
}

enum class Split : std::uint8_t { train = 0, val = 1 };

/// Metadata needed to evaluate the closed-form generator densities.
struct Generator {
  Gmm2dSpec spec;
  double sigma_pad = 0.02;
  Matrix R;   // D x D rotation, x = R [u; w]
  Matrix Pi;  // 2 x D, Π = S Rᵀ

  std::size_t dim() const noexcept { return static_cast<std::size_t>(R.rows()); }
};

/// Samples as rows plus optional generator metadata (absent for real data).
struct Dataset {
  RowMatrix X;
  std::vector<int> labels;
  Split split = Split::train;
  std::optional<Generator> generator;

  std::size_t size() const noexcept { return static_cast<std::size_t>(X.rows()); }
  std::size_t dim() const noexcept { return static_cast<std::size_t>(X.cols()); }
  bool is_synthetic() const noexcept { return generator.has_value(); }
  const Generator& gen() const {
    require(generator.has_value(), "dataset has no generator metadata");
    return *generator;
  }
};

inline Matrix selector_projector(const Matrix& R) {
  return R.transpose().topRows(2);
}

namespace detail {
inline Dataset embed(const GmmSample& s, const Generator& gen, Split split, std::uint64_t filler_seed) {
  const auto D = static_cast<Eigen::Index>(gen.dim());
  const auto n = static_cast<Eigen::Index>(s.points.size());
  Rng rng(filler_seed);
  std::normal_distribution<double> normal(0.0, 1.0);
  Dataset ds;
  ds.split = split;
  ds.labels = s.labels;
  ds.generator = gen;
  ds.X.resize(n, D);
  Vector z(D);
  for (Eigen::Index i = 0; i < n; ++i) {
    z(0) = s.points[static_cast<std::size_t>(i)][0];
    z(1) = s.points[static_cast<std::size_t>(i)][1];
    for (Eigen::Index j = 2; j < D; ++j) z(j) = gen.sigma_pad * normal(rng);
    ds.X.row(i) = (gen.R * z).transpose();
  }
  return ds;
}
}  // namespace detail

/// Builds (train, val) with an explicit rotation.
inline std::pair<Dataset, Dataset> build_dataset(const Gmm2dSpec& spec, const Matrix& R, double sigma_pad,
                                                 std::size_t n_train, std::size_t n_val, std::uint64_t seed) {
  require(R.rows() >= 2 && R.rows() == R.cols(), "build_dataset: rotation must be square with D >= 2");
  require(sigma_pad > 0.0, "build_dataset: sigma_pad must be positive");
  Generator gen{spec, sigma_pad, R, selector_projector(R)};
  auto tr = sample_gmm2d(spec, n_train, derive_seed(seed, 1));
  auto va = sample_gmm2d(spec, n_val, derive_seed(seed, 2));
  return {detail::embed(tr, gen, Split::train, derive_seed(seed, 3)),
          detail::embed(va, gen, Split::val, derive_seed(seed, 4))};
}

/// Builds (train, val): 2D mixture draw, σ_pad filler dims, random rotation.
inline std::pair<Dataset, Dataset> build_dataset(const Gmm2dSpec& spec, std::size_t D, double sigma_pad,
                                                 std::size_t n_train, std::size_t n_val, std::uint64_t seed) {
  require(D >= 2, "build_dataset: D must be >= 2");
  return build_dataset(spec, random_rotation(D, derive_seed(seed, 0)), sigma_pad, n_train, n_val, seed);
}

/// Σ_j log N(w_j; 0, σ_pad²) over the filler coordinates.
inline double filler_logpdf(std::span<const double> w, double sigma_pad) {
  const double c = -0.5 * std::log(2.0 * std::numbers::pi * sigma_pad * sigma_pad);
  double acc = 0.0;
  for (double v : w) acc += c - 0.5 * (v / sigma_pad) * (v / sigma_pad);
  return acc;
}

/// Full D-dimensional generator log-density log p_X(x).
inline double oracle_logpdf(const Vector& x, const Generator& gen) {
  require(static_cast<std::size_t>(x.size()) == gen.dim(), "oracle_logpdf: dimension mismatch");
  const Vector z = gen.R.transpose() * x;
  return gen.spec.logpdf(z(0), z(1)) +
         filler_logpdf(std::span<const double>(z.data() + 2, static_cast<std::size_t>(z.size() - 2)), gen.sigma_pad);
}

/// log p₂(Π x): density of the 2D ancestor of x.
inline double ancestor_logpdf(const Vector& x, const Generator& gen) {
  require(static_cast<std::size_t>(x.size()) == gen.dim(), "ancestor_logpdf: dimension mismatch");
  const Vector u = gen.Pi * x;
  return gen.spec.logpdf(u(0), u(1));
}

/// ancestor_logpdf for every row.
inline std::vector<double> ancestor_logpdf_all(const Dataset& ds) {
  const auto& gen = ds.gen();
  const Matrix U = ds.X * gen.Pi.transpose();
  std::vector<double> out(ds.size());
  for (std::size_t i = 0; i < out.size(); ++i) {
    const auto r = static_cast<Eigen::Index>(i);
    out[i] = gen.spec.logpdf(U(r, 0), U(r, 1));
  }
  return out;
}

}  // namespace divae
