#pragma once

#include <algorithm>
#include <cmath>
#include <cstdint>
#include <limits>
#include <numbers>
#include <string>
#include <string_view>
#include <thread>
#include <vector>

#include "divae/common.hpp"
#include "divae/errors.hpp"
#include "divae/synthgen.hpp"

namespace divae {

/// Affine map u = W (x − mean). PCA fills every field; the oracle teacher
/// reuses it with mean 0 and W = Π.
struct PcaProjector {
  Vector mean;
  Matrix W;                  // d x D, orthonormal rows
  std::vector<double> explained;  // variance per component, non-increasing

  std::size_t in_dim() const noexcept { return static_cast<std::size_t>(W.cols()); }
  std::size_t out_dim() const noexcept { return static_cast<std::size_t>(W.rows()); }

  RowMatrix project(const RowMatrix& X) const {
    require(static_cast<std::size_t>(X.cols()) == in_dim(), "PcaProjector::project: dimension mismatch");
    RowMatrix centered = X.rowwise() - mean.transpose();
    return centered * W.transpose();
  }

  RowMatrix reconstruct(const RowMatrix& U) const {
    RowMatrix X = U * W;
    return X.rowwise() + mean.transpose();
  }
};

/// Top-d principal directions of X (rows are samples).
inline PcaProjector fit_pca(const RowMatrix& X, std::size_t d) {
  const auto N = static_cast<std::size_t>(X.rows());
  const auto D = static_cast<std::size_t>(X.cols());
  require(d >= 1 && d <= D, "fit_pca: need 1 <= d <= D");
  require(N > d, "fit_pca: need more samples than components");
  PcaProjector p;
  p.mean = X.colwise().mean().transpose();
  const RowMatrix centered = X.rowwise() - p.mean.transpose();
  const Matrix cov = (centered.transpose() * centered) / static_cast<double>(N - 1);
  Eigen::SelfAdjointEigenSolver<Matrix> eig(cov);
  require(eig.info() == Eigen::Success, "fit_pca: eigendecomposition failed");
  const auto Di = static_cast<Eigen::Index>(D);
  p.W.resize(static_cast<Eigen::Index>(d), Di);
  for (std::size_t c = 0; c < d; ++c) {
    const Eigen::Index src = Di - 1 - static_cast<Eigen::Index>(c);  // ascending order from Eigen
    Vector v = eig.eigenvectors().col(src);
    Eigen::Index arg = 0;
    v.cwiseAbs().maxCoeff(&arg);
    if (v(arg) < 0.0) v = -v;
    p.W.row(static_cast<Eigen::Index>(c)) = v.transpose();
    p.explained.push_back(std::max(0.0, eig.eigenvalues()(src)));
  }
  return p;
}

enum class Estimator : std::uint8_t { oracle = 0, kde = 1, knn_adaptive = 2 };

inline std::string_view to_string(Estimator e) {
  switch (e) {
    case Estimator::oracle: return "oracle";
    case Estimator::kde: return "kde";
    case Estimator::knn_adaptive: return "knn-adaptive";
  }
  return "?";
}

inline Estimator parse_estimator(std::string_view s) {
  if (s == "oracle") return Estimator::oracle;
  if (s == "kde") return Estimator::kde;
  if (s == "knn-adaptive" || s == "pak") return Estimator::knn_adaptive;
  throw ContractViolation("unknown estimator '" + std::string(s) + "'");
}

/// Per-point teacher log-densities ρ with standard errors σ (nats).
struct DensityEstimate {
  std::vector<double> rho;
  std::vector<double> sigma;
  Estimator tag = Estimator::oracle;
  PcaProjector projector;
  std::size_t fallback_count = 0;  // points where the adaptive rule fell back to k_max

  std::size_t size() const noexcept { return rho.size(); }
};

// ---------------------------------------------------------------------------
// Kernel density

/// Silverman's rule per dimension, averaged into one isotropic bandwidth.
inline double silverman_bandwidth(const RowMatrix& U) {
  const auto n = static_cast<double>(U.rows());
  const auto d = static_cast<double>(U.cols());
  require(U.rows() >= 2, "silverman_bandwidth: need at least two points");
  const double factor = std::pow(4.0 / ((d + 2.0) * n), 1.0 / (d + 4.0));
  double h = 0.0;
  for (Eigen::Index j = 0; j < U.cols(); ++j) {
    const double m = U.col(j).mean();
    const double var = (U.col(j).array() - m).square().sum() / (n - 1.0);
    h += std::sqrt(var) * factor;
  }
  return h / d;
}

/// Leave-one-out Gaussian KDE. σ_i ≡ 1.
inline DensityEstimate kde_logdensity(const RowMatrix& U, double h) {
  const auto N = static_cast<std::size_t>(U.rows());
  const auto d = static_cast<std::size_t>(U.cols());
  require(h > 0.0, "kde_logdensity: bandwidth must be positive");
  require(N >= 2, "kde_logdensity: need at least two points");
  const double norm = std::log(static_cast<double>(N - 1)) +
                      0.5 * static_cast<double>(d) * std::log(2.0 * std::numbers::pi * h * h);
  const double inv2h2 = 1.0 / (2.0 * h * h);
  DensityEstimate est;
  est.tag = Estimator::kde;
  est.rho.resize(N);
  est.sigma.assign(N, 1.0);
  std::vector<double> expo(N);
  for (std::size_t i = 0; i < N; ++i) {
    double mx = -std::numeric_limits<double>::infinity();
    std::size_t m = 0;
    for (std::size_t j = 0; j < N; ++j) {
      if (j == i) continue;
      double r2 = 0.0;
      for (std::size_t c = 0; c < d; ++c) {
        const double t = U(static_cast<Eigen::Index>(i), static_cast<Eigen::Index>(c)) -
                         U(static_cast<Eigen::Index>(j), static_cast<Eigen::Index>(c));
        r2 += t * t;
      }
      expo[m] = -r2 * inv2h2;
      mx = std::max(mx, expo[m]);
      ++m;
    }
    double s = 0.0;
    for (std::size_t j = 0; j < m; ++j) s += std::exp(expo[j] - mx);
    est.rho[i] = mx + std::log(s) - norm;
  }
  return est;
}

// ---------------------------------------------------------------------------
// k-nearest-neighbour density

/// Sorted distances from every point to its k nearest other points (N x k).
/// Exact brute force; rows are split across `threads` workers.
inline RowMatrix knn_distances(const RowMatrix& U, std::size_t k, unsigned threads = 0) {
  const auto N = static_cast<std::size_t>(U.rows());
  const auto d = static_cast<std::size_t>(U.cols());
  require(k >= 1 && k < N, "knn_distances: need 1 <= k < N");
  RowMatrix out(static_cast<Eigen::Index>(N), static_cast<Eigen::Index>(k));
  if (threads == 0) threads = std::max(1u, std::thread::hardware_concurrency());
  threads = static_cast<unsigned>(std::min<std::size_t>(threads, N));

  auto work = [&](std::size_t begin, std::size_t end) {
    std::vector<double> r2(N - 1);
    const double* base = U.data();
    for (std::size_t i = begin; i < end; ++i) {
      const double* ui = base + i * d;
      std::size_t m = 0;
      for (std::size_t j = 0; j < N; ++j) {
        if (j == i) continue;
        const double* uj = base + j * d;
        double acc = 0.0;
        for (std::size_t c = 0; c < d; ++c) {
          const double t = ui[c] - uj[c];
          acc += t * t;
        }
        r2[m++] = acc;
      }
      std::nth_element(r2.begin(), r2.begin() + static_cast<std::ptrdiff_t>(k - 1), r2.end());
      std::sort(r2.begin(), r2.begin() + static_cast<std::ptrdiff_t>(k));
      for (std::size_t c = 0; c < k; ++c)
        out(static_cast<Eigen::Index>(i), static_cast<Eigen::Index>(c)) = std::sqrt(r2[c]);
    }
  };

  if (threads <= 1) {
    work(0, N);
  } else {
    std::vector<std::thread> pool;
    const std::size_t chunk = (N + threads - 1) / threads;
    for (unsigned t = 0; t < threads; ++t) {
      const std::size_t b = t * chunk, e = std::min(N, b + chunk);
      if (b < e) pool.emplace_back(work, b, e);
    }
    for (auto& th : pool) th.join();
  }
  return out;
}

/// log of the volume of the unit ball in ℝ^d.
inline double log_unit_ball_volume(std::size_t d) {
  const double h = 0.5 * static_cast<double>(d);
  return h * std::log(std::numbers::pi) - std::lgamma(h + 1.0);
}

/// Plain kNN log-density ln k − ln N − ln(ω_d r_k^d).
inline double knn_log_density(std::size_t k, std::size_t N, std::size_t d, double r_k) {
  return std::log(static_cast<double>(k)) - std::log(static_cast<double>(N)) - log_unit_ball_volume(d) -
         static_cast<double>(d) * std::log(r_k);
}

struct KnnOptions {
  std::size_t k_max = 64;
  double z = 2.0;          // agreement threshold in units of summed standard errors
  unsigned threads = 0;    // 0: hardware concurrency
};

/// Candidate neighbourhood sizes: 4, 8, 16, ... below k_max, then k_max.
inline std::vector<std::size_t> knn_candidate_ks(std::size_t k_max) {
  std::vector<std::size_t> ks;
  for (std::size_t k = 4; k < k_max; k *= 2) ks.push_back(k);
  ks.push_back(k_max);
  return ks;
}

/// Picks k̂ per point from a row of sorted neighbour distances: the neighbourhood
/// grows while consecutive estimates agree within z(σ(k)+σ(k_prev)), σ(k)=k^{-1/2}.
inline std::size_t adaptive_k(std::span<const double> sorted_r, std::size_t N, std::size_t d, std::size_t k_max,
                              double z) {
  const auto ks = knn_candidate_ks(k_max);
  std::size_t chosen = ks.front();
  for (std::size_t c = 1; c < ks.size(); ++c) {
    const std::size_t kp = ks[c - 1], k = ks[c];
    const double rp = sorted_r[kp - 1], r = sorted_r[k - 1];
    if (!(rp > 0.0 && r > 0.0)) break;
    const double diff = std::abs(knn_log_density(k, N, d, r) - knn_log_density(kp, N, d, rp));
    const double tol = z * (1.0 / std::sqrt(static_cast<double>(k)) + 1.0 / std::sqrt(static_cast<double>(kp)));
    if (diff > tol) break;
    chosen = k;
  }
  return chosen;
}

/// Point-adaptive kNN log-density with per-point standard error k̂^{-1/2}.
inline DensityEstimate knn_logdensity_adaptive(const RowMatrix& U, const KnnOptions& opt = {}) {
  const auto N = static_cast<std::size_t>(U.rows());
  const auto d = static_cast<std::size_t>(U.cols());
  require(opt.k_max >= 4 && N > opt.k_max, "knn_logdensity_adaptive: need N > k_max >= 4");
  const RowMatrix R = knn_distances(U, opt.k_max, opt.threads);

  double min_positive = std::numeric_limits<double>::infinity();
  for (Eigen::Index i = 0; i < R.size(); ++i) {
    const double r = R.data()[i];
    if (r > 0.0) min_positive = std::min(min_positive, r);
  }

  DensityEstimate est;
  est.tag = Estimator::knn_adaptive;
  est.rho.resize(N);
  est.sigma.resize(N);
  for (std::size_t i = 0; i < N; ++i) {
    std::span<const double> row(R.data() + i * opt.k_max, opt.k_max);
    std::size_t k = adaptive_k(row, N, d, opt.k_max, opt.z);
    double r = row[k - 1];
    if (!(r > 0.0)) {
      // Coincident neighbours: fall back to the widest neighbourhood.
      ++est.fallback_count;
      k = opt.k_max;
      r = row[k - 1];
      if (!(r > 0.0)) r = std::isfinite(min_positive) ? min_positive : 1.0;
    }
    est.rho[i] = knn_log_density(k, N, d, r);
    est.sigma[i] = 1.0 / std::sqrt(static_cast<double>(k));
  }
  return est;
}

// ---------------------------------------------------------------------------
// Oracle

/// Generator ancestor log-density as teacher; projector is Π itself.
inline DensityEstimate oracle_teacher(const Dataset& ds) {
  require(ds.is_synthetic(), "oracle_teacher: dataset has no generator metadata");
  DensityEstimate est;
  est.tag = Estimator::oracle;
  est.rho = ancestor_logpdf_all(ds);
  est.sigma.assign(ds.size(), 1.0);
  est.projector.mean = Vector::Zero(static_cast<Eigen::Index>(ds.dim()));
  est.projector.W = ds.gen().Pi;
  est.projector.explained = {0.0, 0.0};
  return est;
}

/// Fits PCA to d components and runs the requested estimator on the projections.
inline DensityEstimate estimate_density(const RowMatrix& X, std::size_t d, Estimator tag, const KnnOptions& knn = {},
                                        double kde_bandwidth = 0.0) {
  require(tag != Estimator::oracle, "estimate_density: oracle needs the generator; use oracle_teacher");
  PcaProjector pca = fit_pca(X, d);
  const RowMatrix U = pca.project(X);
  DensityEstimate est = tag == Estimator::kde
                            ? kde_logdensity(U, kde_bandwidth > 0.0 ? kde_bandwidth : silverman_bandwidth(U))
                            : knn_logdensity_adaptive(U, knn);
  est.projector = std::move(pca);
  return est;
}

}  // namespace divae
