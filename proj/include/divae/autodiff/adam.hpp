#pragma once

#include <cmath>
#include <cstdint>
#include <vector>

#include "divae/autodiff/graph.hpp"

namespace divae::ad {

struct AdamOptions {
  double lr = 1e-3;
  double beta1 = 0.9;
  double beta2 = 0.999;
  double eps = 1e-8;
};

/// Per-parameter moments plus the shared step counter.
struct AdamState {
  AdamOptions options;
  std::int64_t t = 0;
  std::vector<Tensor> m;
  std::vector<Tensor> v;
};

/// One bias-corrected Adam update of `params` given `grads`; advances `state.t`.
inline void adam_step(AdamState& state, std::span<Tensor* const> params, std::span<const Tensor* const> grads) {
  require(params.size() == grads.size(), "adam_step: params/grads count mismatch");
  if (state.m.empty()) {
    for (const Tensor* p : params) {
      state.m.push_back(Tensor::zeros_like(*p));
      state.v.push_back(Tensor::zeros_like(*p));
    }
  }
  require(state.m.size() == params.size() && state.v.size() == params.size(), "adam_step: state size mismatch");
  for (std::size_t i = 0; i < params.size(); ++i) {
    require(params[i]->shape() == grads[i]->shape() && params[i]->shape() == state.m[i].shape() &&
                params[i]->shape() == state.v[i].shape(),
            "adam_step: shape mismatch for parameter " + std::to_string(i));
  }

  const auto& o = state.options;
  state.t += 1;
  const double bc1 = 1.0 - std::pow(o.beta1, static_cast<double>(state.t));
  const double bc2 = 1.0 - std::pow(o.beta2, static_cast<double>(state.t));
  for (std::size_t i = 0; i < params.size(); ++i) {
    auto p = params[i]->values();
    auto g = grads[i]->values();
    auto m = state.m[i].values();
    auto v = state.v[i].values();
    for (std::size_t j = 0; j < p.size(); ++j) {
      m[j] = o.beta1 * m[j] + (1.0 - o.beta1) * g[j];
      v[j] = o.beta2 * v[j] + (1.0 - o.beta2) * g[j] * g[j];
      const double mhat = m[j] / bc1;
      const double vhat = v[j] / bc2;
      p[j] -= o.lr * mhat / (std::sqrt(vhat) + o.eps);
    }
  }
}

/// Adam bound to a fixed list of parameter leaves.
class Adam {
 public:
  Adam() = default;
  Adam(std::vector<Var> params, AdamOptions options) : params_(std::move(params)) { state_.options = options; }

  void zero_grad() {
    for (auto& p : params_) p.zero_grad();
  }

  void step() {
    std::vector<Tensor*> values;
    std::vector<const Tensor*> grads;
    for (auto& p : params_) {
      if (p.grad().shape() != p.value().shape()) p.zero_grad();
      values.push_back(&p.mutable_value());
      grads.push_back(&p.grad());
    }
    adam_step(state_, values, grads);
  }

  AdamState& state() noexcept { return state_; }
  const AdamState& state() const noexcept { return state_; }
  const std::vector<Var>& params() const noexcept { return params_; }

 private:
  std::vector<Var> params_;
  AdamState state_;
};

}  // namespace divae::ad
