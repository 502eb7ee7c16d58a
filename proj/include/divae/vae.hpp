#pragma once

#include <cmath>
#include <cstdint>
#include <numbers>
#include <random>
#include <string>
#include <string_view>
#include <utility>
#include <vector>

#include "divae/autodiff.hpp"
#include "divae/common.hpp"
#include "divae/errors.hpp"

namespace divae {

using ad::Tensor;
using ad::Var;

enum class PriorKind : std::uint8_t { standard = 0, gmm = 1, vamp = 2 };
enum class DecoderKind : std::uint8_t { gaussian = 0, bernoulli = 1 };
enum class Activation : std::uint8_t { tanh = 0, identity = 1 };

inline std::string_view to_string(PriorKind p) {
  switch (p) {
    case PriorKind::standard: return "standard";
    case PriorKind::gmm: return "gmm";
    case PriorKind::vamp: return "vamp";
  }
  return "?";
}

inline PriorKind parse_prior(std::string_view s) {
  if (s == "standard") return PriorKind::standard;
  if (s == "gmm") return PriorKind::gmm;
  if (s == "vamp") return PriorKind::vamp;
  throw ContractViolation("unknown prior '" + std::string(s) + "'");
}

inline std::string_view to_string(DecoderKind d) { return d == DecoderKind::gaussian ? "gaussian" : "bernoulli"; }
inline std::string_view to_string(Activation a) { return a == Activation::tanh ? "tanh" : "identity"; }

inline DecoderKind parse_decoder(std::string_view s) {
  if (s == "gaussian") return DecoderKind::gaussian;
  if (s == "bernoulli") return DecoderKind::bernoulli;
  throw ContractViolation("unknown decoder '" + std::string(s) + "'");
}

inline Activation parse_activation(std::string_view s) {
  if (s == "tanh") return Activation::tanh;
  if (s == "identity") return Activation::identity;
  throw ContractViolation("unknown activation '" + std::string(s) + "'");
}

/// Ordered, named parameter leaves. Names are checkpoint keys.
class ParamSet {
 public:
  Var add(std::string name, Tensor init) {
    for (const auto& [n, _] : items_) require(n != name, "ParamSet: duplicate parameter '" + name + "'");
    Var v = ad::parameter(std::move(init));
    items_.emplace_back(std::move(name), v);
    return v;
  }

  const Var& at(std::string_view name) const {
    for (const auto& [n, v] : items_)
      if (n == name) return v;
    throw ContractViolation("ParamSet: no parameter '" + std::string(name) + "'");
  }

  bool contains(std::string_view name) const {
    for (const auto& [n, _] : items_)
      if (n == name) return true;
    return false;
  }

  std::vector<Var> vars() const {
    std::vector<Var> out;
    for (const auto& [_, v] : items_) out.push_back(v);
    return out;
  }

  const std::vector<std::pair<std::string, Var>>& items() const noexcept { return items_; }

  std::size_t count() const {
    std::size_t n = 0;
    for (const auto& [_, v] : items_) n += v.value().size();
    return n;
  }

 private:
  std::vector<std::pair<std::string, Var>> items_;
};

/// Uniform(±1/√fan_in) fill, the usual dense-layer default.
inline Tensor fan_in_uniform(ad::Shape shape, std::size_t fan_in, Rng& rng) {
  Tensor t(std::move(shape));
  const double a = 1.0 / std::sqrt(static_cast<double>(fan_in));
  std::uniform_real_distribution<double> u(-a, a);
  for (auto& v : t.values()) v = u(rng);
  return t;
}

/// One dense layer's weights.
struct Dense {
  Var w;  // [in, out]
  Var b;  // [out]

  static Dense make(ParamSet& ps, const std::string& prefix, std::size_t in, std::size_t out, Rng& rng) {
    Dense d;
    d.w = ps.add(prefix + ".w", fan_in_uniform({in, out}, in, rng));
    d.b = ps.add(prefix + ".b", fan_in_uniform({out}, in, rng));
    return d;
  }

  Var operator()(const Var& x) const { return ad::affine(x, w, b); }
};

inline Var activate(const Var& x, Activation a) { return a == Activation::tanh ? ad::tanh(x) : x; }

struct VaeConfig {
  std::size_t input_dim = 0;
  std::size_t hidden_dim = 0;
  std::size_t latent_dim = 2;
  DecoderKind decoder = DecoderKind::gaussian;
  double sigma_x = 0.02;
  Activation activation = Activation::tanh;
  PriorKind prior = PriorKind::standard;
  std::size_t prior_components = 10;
  double logvar_clamp = 10.0;
};

/// Diagonal Gaussian posterior parameters, each [B,d].
struct Posterior {
  Var mu;
  Var logvar;
};

/// Per-point quantities of one stochastic ELBO evaluation, each [B] unless noted.
struct ElboTerms {
  Posterior post;
  Var z;        // [B,d]
  Var loglik;   // log p_θ(x|z)
  Var s;        // log p_Z(z)
  Var kl;       // analytic (standard prior) or one-sample log q − log p_Z
};

inline constexpr double kLog2Pi = 1.8378770664093453;  // ln(2π)

class VaeModel {
 public:
  VaeModel() = default;
  // Copies would alias parameter nodes; use clone().
  VaeModel(const VaeModel&) = delete;
  VaeModel& operator=(const VaeModel&) = delete;
  VaeModel(VaeModel&&) = default;
  VaeModel& operator=(VaeModel&&) = default;

  VaeModel(const VaeConfig& cfg, std::uint64_t seed) : cfg_(cfg) {
    require(cfg.input_dim >= 1 && cfg.hidden_dim >= 1 && cfg.latent_dim >= 1, "VaeModel: dimensions must be >= 1");
    require(cfg.sigma_x > 0.0, "VaeModel: sigma_x must be positive");
    Rng rng(seed);
    const std::size_t D = cfg.input_dim, H = cfg.hidden_dim, d = cfg.latent_dim;
    enc1_ = Dense::make(params_, "enc.fc1", D, H, rng);
    enc2_ = Dense::make(params_, "enc.fc2", H, 2 * d, rng);
    dec1_ = Dense::make(params_, "dec.fc1", d, H, rng);
    dec2_ = Dense::make(params_, "dec.fc2", H, D, rng);
    const std::size_t K = cfg.prior_components;
    if (cfg.prior == PriorKind::gmm) {
      require(K >= 1, "VaeModel: gmm prior needs >= 1 component");
      std::normal_distribution<double> normal(0.0, 1.0);
      Tensor means({K, d});
      for (auto& v : means.values()) v = normal(rng);
      prior_logits_ = params_.add("prior.logits", Tensor({K}, 0.0));
      prior_means_ = params_.add("prior.means", std::move(means));
      prior_log_scales_ = params_.add("prior.log_scales", Tensor({K, d}, 0.0));
    } else if (cfg.prior == PriorKind::vamp) {
      require(K >= 1, "VaeModel: vamp prior needs >= 1 pseudo-input");
      std::normal_distribution<double> normal(0.0, 0.1);
      Tensor pseudo({K, D});
      for (auto& v : pseudo.values()) v = normal(rng);
      pseudo_inputs_ = params_.add("prior.pseudo_inputs", std::move(pseudo));
    }
  }

  const VaeConfig& config() const noexcept { return cfg_; }
  const ParamSet& params() const noexcept { return params_; }
  std::size_t latent_dim() const noexcept { return cfg_.latent_dim; }

  /// Sets VampPrior pseudo-inputs to K rows of X chosen by seed.
  void init_pseudo_inputs(const RowMatrix& X, std::uint64_t seed) {
    require(cfg_.prior == PriorKind::vamp, "init_pseudo_inputs: prior is not vamp");
    require(static_cast<std::size_t>(X.cols()) == cfg_.input_dim && X.rows() > 0,
            "init_pseudo_inputs: data shape mismatch");
    Rng rng(seed);
    std::uniform_int_distribution<Eigen::Index> pick(0, X.rows() - 1);
    Tensor& p = pseudo_inputs_.mutable_value();
    const std::size_t D = cfg_.input_dim;
    for (std::size_t k = 0; k < cfg_.prior_components; ++k) {
      const Eigen::Index r = pick(rng);
      for (std::size_t j = 0; j < D; ++j) p[k * D + j] = X(r, static_cast<Eigen::Index>(j));
    }
  }

  Posterior encode(const Var& x) const {
    const Var h = activate(enc1_(x), cfg_.activation);
    const Var out = enc2_(h);
    const std::size_t d = cfg_.latent_dim;
    return {ad::slice_last(out, 0, d),
            ad::clamp(ad::slice_last(out, d, 2 * d), -cfg_.logvar_clamp, cfg_.logvar_clamp)};
  }

  /// z = μ + σ ⊙ ε with ε supplied by the caller.
  static Var reparameterize(const Posterior& post, const Tensor& noise) {
    require(noise.shape() == post.mu.shape(), "reparameterize: noise shape mismatch");
    return ad::add(post.mu, ad::mul(ad::exp(ad::scale(post.logvar, 0.5)), ad::constant(noise)));
  }

  /// Decoder output: mean x̂ (Gaussian) or Bernoulli probabilities.
  Var decode(const Var& z) const {
    const Var out = dec2_(activate(dec1_(z), cfg_.activation));
    if (cfg_.decoder == DecoderKind::gaussian) return out;
    return ad::clamp(ad::sigmoid(out), 1e-7, 1.0 - 1e-7);
  }

  /// log p_θ(x|z) per row, [B].
  Var decoder_loglik(const Var& x, const Var& z) const {
    require(x.value().cols() == cfg_.input_dim, "decoder_loglik: input dimension mismatch");
    const Var xhat = decode(z);
    const double D = static_cast<double>(cfg_.input_dim);
    if (cfg_.decoder == DecoderKind::gaussian) {
      const double s2 = cfg_.sigma_x * cfg_.sigma_x;
      const double c = -0.5 * D * std::log(2.0 * std::numbers::pi * s2);
      return ad::add_scalar(ad::scale(ad::sum_last(ad::square(ad::sub(x, xhat))), -0.5 / s2), c);
    }
    for (double v : x.value().values())
      require(v >= 0.0 && v <= 1.0, "decoder_loglik: Bernoulli targets must lie in [0,1]");
    Tensor one_minus = x.value();
    for (auto& v : one_minus.values()) v = 1.0 - v;
    const Var t1 = ad::mul(x, ad::log(xhat));
    const Var t2 = ad::mul(ad::constant(std::move(one_minus)), ad::log(ad::add_scalar(ad::neg(xhat), 1.0)));
    return ad::sum_last(ad::add(t1, t2));
  }

  /// log p_Z(z) per row, [B].
  Var prior_logpdf(const Var& z) const {
    require(z.value().rank() == 2 && z.value().cols() == cfg_.latent_dim, "prior_logpdf: latent dimension mismatch");
    const double d = static_cast<double>(cfg_.latent_dim);
    switch (cfg_.prior) {
      case PriorKind::standard:
        return ad::add_scalar(ad::scale(ad::sum_last(ad::square(z)), -0.5), -0.5 * d * kLog2Pi);
      case PriorKind::gmm: {
        const Var comp = ad::pairwise_diag_gauss_logpdf(z, prior_means_, prior_log_scales_);
        return ad::logsumexp_last(ad::add_rowvec(comp, ad::log_softmax_last(prior_logits_)));
      }
      case PriorKind::vamp: {
        const Posterior pp = encode(pseudo_inputs_);
        const Var comp = ad::pairwise_diag_gauss_logpdf(z, pp.mu, ad::scale(pp.logvar, 0.5));
        return ad::add_scalar(ad::logsumexp_last(comp),
                              -std::log(static_cast<double>(cfg_.prior_components)));
      }
    }
    throw ContractViolation("prior_logpdf: unknown prior");
  }

  /// log q_φ(z|x) per row, [B].
  static Var posterior_logpdf(const Var& z, const Posterior& post) {
    const double d = static_cast<double>(z.value().cols());
    const Var t = ad::mul(ad::sub(z, post.mu), ad::exp(ad::scale(post.logvar, -0.5)));
    const Var inner = ad::add(ad::square(t), post.logvar);
    return ad::add_scalar(ad::scale(ad::sum_last(inner), -0.5), -0.5 * d * kLog2Pi);
  }

  /// KL(q ‖ N(0,I)) in closed form per row, [B].
  static Var kl_standard(const Posterior& post) {
    const Var inner = ad::sub(ad::add(ad::square(post.mu), ad::exp(post.logvar)), post.logvar);
    const double d = static_cast<double>(post.mu.value().cols());
    return ad::scale(ad::add_scalar(ad::sum_last(inner), -d), 0.5);
  }

  /// One reparameterized ELBO evaluation on a batch.
  ElboTerms elbo_terms(const Var& x, const Tensor& noise) const {
    ElboTerms t;
    t.post = encode(x);
    t.z = reparameterize(t.post, noise);
    t.loglik = decoder_loglik(x, t.z);
    t.s = prior_logpdf(t.z);
    t.kl = cfg_.prior == PriorKind::standard ? kl_standard(t.post)
                                            : ad::sub(posterior_logpdf(t.z, t.post), t.s);
    return t;
  }

  /// Per-point ELBO estimate ℒ̂_i = log p(x|z) − KL, [B].
  Var elbo_point(const Var& x, const Tensor& noise) const {
    const ElboTerms t = elbo_terms(x, noise);
    return ad::sub(t.loglik, t.kl);
  }

  /// Independent deep copy of the parameters.
  VaeModel clone() const {
    VaeModel m(cfg_, 0);
    m.copy_values_from(*this);
    return m;
  }

  /// Overwrites parameter values from another model with identical layout.
  void copy_values_from(const VaeModel& other) {
    require(other.params_.items().size() == params_.items().size(), "copy_values_from: layout mismatch");
    for (std::size_t i = 0; i < params_.items().size(); ++i) {
      Var v = params_.items()[i].second;
      v.mutable_value() = other.params_.items()[i].second.value();
    }
  }

 private:
  VaeConfig cfg_;
  ParamSet params_;
  Dense enc1_, enc2_, dec1_, dec2_;
  Var prior_logits_, prior_means_, prior_log_scales_;
  Var pseudo_inputs_;
};

/// Copies selected rows of X into a [B,D] tensor.
inline Tensor gather_rows(const RowMatrix& X, std::span<const std::size_t> idx) {
  const auto D = static_cast<std::size_t>(X.cols());
  Tensor t({idx.size(), D});
  for (std::size_t b = 0; b < idx.size(); ++b) {
    const double* src = X.data() + idx[b] * D;
    std::copy(src, src + D, &t[b * D]);
  }
  return t;
}

inline Tensor gaussian_noise(std::size_t rows, std::size_t cols, Rng& rng) {
  std::normal_distribution<double> normal(0.0, 1.0);
  Tensor t({rows, cols});
  for (auto& v : t.values()) v = normal(rng);
  return t;
}

}  // namespace divae
