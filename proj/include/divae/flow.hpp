#pragma once

#include <cstdint>
#include <functional>
#include <numeric>
#include <random>
#include <string>
#include <vector>

#include "divae/vae.hpp"

namespace divae {

struct FlowConfig {
  std::size_t dim = 2;
  std::size_t layers = 5;
  std::size_t hidden = 16;
  double scale_bound = 2.0;
};

/// Output of a flow pass: transformed points and log|det J| per row.
struct FlowResult {
  Var out;     // [B,d]
  Var logdet;  // [B]
  std::vector<Var> layer_logdets;
};

/// Affine coupling: the conditioning half passes through unchanged, the other
/// half is scaled by exp(bound·tanh(net_s)) and shifted by net_t.
class CouplingLayer {
 public:
  CouplingLayer() = default;

  CouplingLayer(ParamSet& ps, const std::string& prefix, std::size_t dim, std::size_t hidden, double bound,
                bool parity, Rng& rng) {
    require(dim >= 2, "CouplingLayer: dimension must be >= 2");
    const std::size_t first = (dim + 1) / 2;
    for (std::size_t j = 0; j < dim; ++j) (((j < first) != parity) ? cond_ : trans_).push_back(j);
    std::vector<std::size_t> order = cond_;
    order.insert(order.end(), trans_.begin(), trans_.end());
    perm_.resize(dim);
    for (std::size_t p = 0; p < dim; ++p) perm_[order[p]] = p;

    const std::size_t nc = cond_.size(), nt = trans_.size();
    s1_ = Dense::make(ps, prefix + ".s1", nc, hidden, rng);
    s2_ = zero_dense(ps, prefix + ".s2", hidden, nt);
    t1_ = Dense::make(ps, prefix + ".t1", nc, hidden, rng);
    t2_ = zero_dense(ps, prefix + ".t2", hidden, nt);
    bound_ = ps.add(prefix + ".bound", Tensor::scalar(bound));
  }

  const std::vector<std::size_t>& conditioning() const noexcept { return cond_; }
  const std::vector<std::size_t>& transformed() const noexcept { return trans_; }

  FlowResult forward(const Var& z) const {
    const Var a = ad::select_last(z, cond_);
    const Var b = ad::select_last(z, trans_);
    const Var s = scale(a);
    const Var bp = ad::add(ad::mul(b, ad::exp(s)), shift(a));
    return {ad::select_last(ad::concat_last(a, bp), perm_), ad::sum_last(s), {}};
  }

  FlowResult inverse(const Var& u) const {
    const Var a = ad::select_last(u, cond_);
    const Var bp = ad::select_last(u, trans_);
    const Var s = scale(a);
    const Var b = ad::mul(ad::sub(bp, shift(a)), ad::exp(ad::neg(s)));
    return {ad::select_last(ad::concat_last(a, b), perm_), ad::neg(ad::sum_last(s)), {}};
  }

 private:
  static Dense zero_dense(ParamSet& ps, const std::string& prefix, std::size_t in, std::size_t out) {
    Dense d;
    d.w = ps.add(prefix + ".w", Tensor({in, out}, 0.0));
    d.b = ps.add(prefix + ".b", Tensor({out}, 0.0));
    return d;
  }

  Var scale(const Var& a) const { return ad::mul_scalar(ad::tanh(s2_(ad::tanh(s1_(a)))), bound_); }
  Var shift(const Var& a) const { return t2_(ad::tanh(t1_(a))); }

  std::vector<std::size_t> cond_, trans_, perm_;
  Dense s1_, s2_, t1_, t2_;
  Var bound_;
};

/// Invertible f: Z → U as a stack of coupling layers with alternating masks.
class FlowModel {
 public:
  FlowModel() = default;
  FlowModel(const FlowModel&) = delete;
  FlowModel& operator=(const FlowModel&) = delete;
  FlowModel(FlowModel&&) = default;
  FlowModel& operator=(FlowModel&&) = default;

  FlowModel(const FlowConfig& cfg, std::uint64_t seed) : cfg_(cfg) {
    require(cfg.layers >= 1, "FlowModel: need at least one layer");
    require(cfg.dim >= 2, "FlowModel: dimension must be >= 2");
    Rng rng(seed);
    for (std::size_t l = 0; l < cfg.layers; ++l)
      layers_.emplace_back(params_, "flow/layer" + std::to_string(l), cfg.dim, cfg.hidden, cfg.scale_bound,
                           l % 2 == 1, rng);
  }

  const FlowConfig& config() const noexcept { return cfg_; }
  const ParamSet& params() const noexcept { return params_; }
  const std::vector<CouplingLayer>& layers() const noexcept { return layers_; }

  /// u = f(z) with log|det J_f(z)|.
  FlowResult forward(const Var& z) const {
    require(z.value().rank() == 2 && z.value().cols() == cfg_.dim, "FlowModel::forward: dimension mismatch");
    FlowResult r{z, Var(), {}};
    for (const auto& layer : layers_) {
      FlowResult step = layer.forward(r.out);
      r.out = step.out;
      r.layer_logdets.push_back(step.logdet);
    }
    r.logdet = sum_logdets(r.layer_logdets);
    return r;
  }

  /// z = f⁻¹(u) with log|det J_{f⁻¹}(u)|.
  FlowResult inverse(const Var& u) const {
    require(u.value().rank() == 2 && u.value().cols() == cfg_.dim, "FlowModel::inverse: dimension mismatch");
    FlowResult r{u, Var(), {}};
    for (auto it = layers_.rbegin(); it != layers_.rend(); ++it) {
      FlowResult step = it->inverse(r.out);
      r.out = step.out;
      r.layer_logdets.push_back(step.logdet);
    }
    r.logdet = sum_logdets(r.layer_logdets);
    return r;
  }

  /// Replaces every parameter with N(0, stddev²) noise (tests want non-identity flows).
  void randomize(std::uint64_t seed, double stddev) {
    Rng rng(seed);
    std::normal_distribution<double> normal(0.0, stddev);
    for (const auto& [name, v] : params_.items()) {
      Var p = v;
      for (auto& x : p.mutable_value().values()) x = normal(rng);
    }
  }

 private:
  static Var sum_logdets(const std::vector<Var>& parts) {
    Var acc = parts.front();
    for (std::size_t i = 1; i < parts.size(); ++i) acc = ad::add(acc, parts[i]);
    return acc;
  }

  FlowConfig cfg_;
  ParamSet params_;
  std::vector<CouplingLayer> layers_;
};

using LogDensityFn = std::function<Var(const Var&)>;

/// Maximum-likelihood loss of the flow on projections u [B,d]:
/// −mean[log p_Z(f⁻¹(u)) + log|det J_{f⁻¹}(u)|].
inline Var flow_mle_loss(const Var& u, const FlowModel& flow, const LogDensityFn& base_logpdf) {
  const FlowResult inv = flow.inverse(u);
  return ad::neg(ad::mean(ad::add(base_logpdf(inv.out), inv.logdet)));
}

}  // namespace divae
