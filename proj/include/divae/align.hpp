#pragma once

#include <algorithm>
#include <cmath>
#include <optional>
#include <span>
#include <string>
#include <string_view>
#include <vector>

#include "divae/flow.hpp"
#include "divae/vae.hpp"

namespace divae {

enum class AlignMethod : std::uint8_t { none = 0, direct = 1, flow = 2 };

inline std::string_view to_string(AlignMethod m) {
  switch (m) {
    case AlignMethod::none: return "none";
    case AlignMethod::direct: return "direct";
    case AlignMethod::flow: return "flow";
  }
  return "?";
}

inline AlignMethod parse_method(std::string_view s) {
  if (s == "none") return AlignMethod::none;
  if (s == "direct") return AlignMethod::direct;
  if (s == "flow") return AlignMethod::flow;
  throw ContractViolation("unknown method '" + std::string(s) + "'");
}

struct AlignConfig {
  AlignMethod method = AlignMethod::none;
  double delta = 1.0;
  bool detach_encoder = false;
  double kl_start = 0.1;
  double kl_end = 1.0;
  double kl_warmup_fraction = 0.5;
};

/// Scalar Huber penalty Γ_δ(e).
inline double huber(double e, double delta) {
  require(delta > 0.0, "huber: delta must be positive");
  const double a = std::abs(e);
  return a <= delta ? 0.5 * e * e : delta * (a - 0.5 * delta);
}

struct Schedule {
  double gamma = 0.0;      // alignment weight γ_t
  double kl_factor = 1.0;  // multiplier on the ELBO's KL term
};

/// Per-epoch warm-ups: γ_t linear 0 → 1 across training; KL factor linear
/// kl_start → kl_end over the first `kl_warmup_fraction` of epochs.
inline Schedule schedules(std::size_t epoch, std::size_t total_epochs, const AlignConfig& cfg = {}) {
  require(total_epochs >= 1 && epoch < total_epochs, "schedules: need 0 <= epoch < total_epochs");
  Schedule s;
  s.gamma = total_epochs > 1 ? std::clamp(static_cast<double>(epoch) / static_cast<double>(total_epochs - 1), 0.0, 1.0)
                             : 1.0;
  const double warm = cfg.kl_warmup_fraction * static_cast<double>(total_epochs);
  const double frac = warm > 0.0 ? std::min(1.0, static_cast<double>(epoch) / warm) : 1.0;
  s.kl_factor = cfg.kl_start + (cfg.kl_end - cfg.kl_start) * frac;
  return s;
}

/// sqrt((1/B) Σ w_i Γ_δ(r_i)) with w_i = σ_i⁻², for residuals r [B].
inline Var weighted_huber_rms(const Var& residual, std::span<const double> sigma, double delta) {
  const std::size_t B = residual.value().size();
  require(B > 0, "alignment loss: empty batch");
  require(residual.value().rank() == 1 && sigma.size() == B, "alignment loss: length mismatch");
  Tensor w({B});
  for (std::size_t i = 0; i < B; ++i) {
    require(sigma[i] > 0.0, "alignment loss: standard errors must be positive");
    w[i] = 1.0 / (sigma[i] * sigma[i]);
  }
  return ad::sqrt(ad::mean(ad::mul(ad::constant(std::move(w)), ad::huber(residual, delta))));
}

/// Direct aligner: penalizes s_i − ρ_i.
inline Var direct_align_loss(const Var& s, std::span<const double> rho, std::span<const double> sigma,
                             double delta) {
  require(rho.size() == s.value().size(), "direct_align_loss: length mismatch");
  Tensor r({rho.size()});
  std::copy(rho.begin(), rho.end(), r.values().begin());
  return weighted_huber_rms(ad::sub(s, ad::constant(std::move(r))), sigma, delta);
}

/// Flow-corrected aligner: penalizes s_i − ρ_i − log|det J_f(z_i)|, with the
/// log-det term cut from the graph so the flow receives no gradient from it.
inline Var flow_align_loss(const Var& s, std::span<const double> rho, std::span<const double> sigma,
                           const Var& logdet, double delta) {
  require(rho.size() == s.value().size() && logdet.value().size() == s.value().size(),
          "flow_align_loss: length mismatch");
  Tensor r({rho.size()});
  std::copy(rho.begin(), rho.end(), r.values().begin());
  const Var residual = ad::sub(ad::sub(s, ad::constant(std::move(r))), ad::stop_gradient(logdet));
  return weighted_huber_rms(residual, sigma, delta);
}

/// Teacher values for one batch, indexed by sample id.
struct BatchTeacher {
  std::vector<double> rho;
  std::vector<double> sigma;
  Tensor projections;  // [B,d] u_i (needed by the flow method)
};

/// The scalar objective plus each term for diagnostics.
struct LossTerms {
  Var total;
  double neg_elbo = 0.0;     // −mean ELBO with the warm-up KL factor
  double elbo = 0.0;         // mean ELBO with KL factor 1
  double align = 0.0;
  double flow_ml = 0.0;
  Schedule schedule;
};

/// Assembles −ELBO (+ γ_t·alignment (+ flow ML)) for one batch.
inline LossTerms total_loss(const Var& x, const Tensor& noise, const VaeModel& model, const FlowModel* flow,
                            const std::optional<BatchTeacher>& teacher, const AlignConfig& cfg,
                            const Schedule& sched) {
  const ElboTerms t = model.elbo_terms(x, noise);
  const Var elbo_i = ad::sub(t.loglik, ad::scale(t.kl, sched.kl_factor));
  LossTerms out;
  out.schedule = sched;
  out.total = ad::neg(ad::mean(elbo_i));
  out.neg_elbo = out.total.item();
  {
    double acc = 0.0;
    for (std::size_t i = 0; i < t.loglik.value().size(); ++i) acc += t.loglik.value()[i] - t.kl.value()[i];
    out.elbo = acc / static_cast<double>(t.loglik.value().size());
  }
  if (cfg.method == AlignMethod::none) return out;

  require(teacher.has_value(), "total_loss: alignment needs teacher values");
  const std::size_t B = t.s.value().size();
  require(teacher->rho.size() == B && teacher->sigma.size() == B, "total_loss: missing teacher values for batch");
  const Var s = cfg.detach_encoder ? model.prior_logpdf(ad::stop_gradient(t.z)) : t.s;

  if (cfg.method == AlignMethod::direct) {
    const Var align = direct_align_loss(s, teacher->rho, teacher->sigma, cfg.delta);
    out.align = align.item();
    out.total = ad::add(out.total, ad::scale(align, sched.gamma));
    return out;
  }

  require(flow != nullptr, "total_loss: flow method needs a flow model");
  require(teacher->projections.rows() == B, "total_loss: missing projections for batch");
  const FlowResult fwd = flow->forward(t.z);
  const Var align = flow_align_loss(s, teacher->rho, teacher->sigma, fwd.logdet, cfg.delta);
  const Var ml = flow_mle_loss(ad::constant(teacher->projections), *flow,
                               [&model](const Var& z) { return model.prior_logpdf(z); });
  out.align = align.item();
  out.flow_ml = ml.item();
  out.total = ad::add(ad::add(out.total, ad::scale(align, sched.gamma)), ml);
  return out;
}

}  // namespace divae
