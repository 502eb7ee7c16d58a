#pragma once

#include <chrono>
#include <cstdint>
#include <numeric>
#include <optional>
#include <vector>

#include "divae/align.hpp"
#include "divae/density.hpp"

namespace divae {

struct TrainConfig {
  std::size_t epochs = 100;
  std::size_t batch = 128;
  double lr = 1e-3;
  std::uint64_t seed = 0;
  AlignConfig align;
};

struct EpochRecord {
  std::size_t epoch = 0;
  double elbo = 0.0;
  double neg_elbo = 0.0;
  double align = 0.0;
  double flow_ml = 0.0;
  double gamma = 0.0;
  double kl_factor = 0.0;
  std::size_t batches = 0;
  double seconds_epoch = 0.0;
  double seconds_per_batch = 0.0;
};

/// Mini-batch Adam training of a VAE (and optional flow) against a teacher.
/// Batch order and reparameterization noise are pure functions of
/// (seed, epoch, step), so a run can resume from saved counters.
class Trainer {
 public:
  Trainer(VaeModel& model, FlowModel* flow, const RowMatrix& X, const DensityEstimate* teacher, TrainConfig cfg)
      : model_(model), flow_(flow), X_(X), teacher_(teacher), cfg_(cfg) {
    require(cfg.batch >= 1 && cfg.epochs >= 1, "Trainer: batch and epochs must be >= 1");
    require(X.rows() > 0, "Trainer: empty training set");
    if (cfg.align.method != AlignMethod::none) {
      require(teacher != nullptr, "Trainer: alignment needs a teacher");
      require(teacher->size() == static_cast<std::size_t>(X.rows()),
              "Trainer: teacher must cover every training point");
    }
    if (cfg.align.method == AlignMethod::flow) {
      require(flow != nullptr, "Trainer: flow method needs a flow model");
      U_ = teacher->projector.project(X);
      require(static_cast<std::size_t>(U_.cols()) == flow->config().dim,
              "Trainer: projector dimension must match the flow dimension");
    }
    ad::AdamOptions opt;
    opt.lr = cfg.lr;
    vae_opt_ = ad::Adam(model.params().vars(), opt);
    if (flow != nullptr && cfg.align.method == AlignMethod::flow) flow_opt_ = ad::Adam(flow->params().vars(), opt);
  }

  const TrainConfig& config() const noexcept { return cfg_; }
  std::size_t epoch() const noexcept { return epoch_; }
  std::size_t batch_in_epoch() const noexcept { return batch_in_epoch_; }
  std::uint64_t global_step() const noexcept { return step_; }
  bool finished() const noexcept { return epoch_ >= cfg_.epochs; }
  std::size_t batches_per_epoch() const noexcept { return (static_cast<std::size_t>(X_.rows()) + cfg_.batch - 1) / cfg_.batch; }

  ad::Adam& vae_optimizer() noexcept { return vae_opt_; }
  ad::Adam& flow_optimizer() noexcept { return flow_opt_; }

  /// Restores the position counters (checkpoint resume).
  void set_position(std::size_t epoch, std::size_t batch_in_epoch, std::uint64_t step) {
    epoch_ = epoch;
    batch_in_epoch_ = batch_in_epoch;
    step_ = step;
    perm_epoch_.reset();
  }

  /// Deterministic shuffle of sample ids for an epoch.
  std::vector<std::size_t> epoch_permutation(std::size_t epoch) const {
    std::vector<std::size_t> p(static_cast<std::size_t>(X_.rows()));
    std::iota(p.begin(), p.end(), std::size_t{0});
    Rng rng(derive_seed(derive_seed(cfg_.seed, 101), epoch));
    std::shuffle(p.begin(), p.end(), rng);
    return p;
  }

  /// Runs one optimizer step on the next batch; returns the loss terms.
  LossTerms next_step() {
    require(!finished(), "Trainer: training already finished");
    if (perm_epoch_ != epoch_) {
      perm_ = epoch_permutation(epoch_);
      perm_epoch_ = epoch_;
    }
    const std::size_t N = perm_.size();
    const std::size_t begin = batch_in_epoch_ * cfg_.batch;
    const std::size_t end = std::min(N, begin + cfg_.batch);
    std::span<const std::size_t> idx(perm_.data() + begin, end - begin);

    const Schedule sched = schedules(epoch_, cfg_.epochs, cfg_.align);
    LossTerms terms = step_on(idx, sched);

    ++step_;
    if (end >= N) {
      ++epoch_;
      batch_in_epoch_ = 0;
    } else {
      ++batch_in_epoch_;
    }
    return terms;
  }

  /// Finishes the current epoch and reports its averages and wall-clock.
  EpochRecord run_epoch() {
    require(!finished(), "Trainer: training already finished");
    EpochRecord rec;
    rec.epoch = epoch_;
    const Schedule sched = schedules(epoch_, cfg_.epochs, cfg_.align);
    rec.gamma = sched.gamma;
    rec.kl_factor = sched.kl_factor;
    const std::size_t start_epoch = epoch_;
    const auto t0 = std::chrono::steady_clock::now();
    while (epoch_ == start_epoch) {
      const LossTerms t = next_step();
      rec.elbo += t.elbo;
      rec.neg_elbo += t.neg_elbo;
      rec.align += t.align;
      rec.flow_ml += t.flow_ml;
      ++rec.batches;
    }
    const auto t1 = std::chrono::steady_clock::now();
    const double n = static_cast<double>(rec.batches);
    rec.elbo /= n;
    rec.neg_elbo /= n;
    rec.align /= n;
    rec.flow_ml /= n;
    rec.seconds_epoch = std::chrono::duration<double>(t1 - t0).count();
    rec.seconds_per_batch = rec.seconds_epoch / n;
    return rec;
  }

  /// One gradient step on an explicit batch.
  LossTerms step_on(std::span<const std::size_t> idx, const Schedule& sched) {
    const Var x = ad::constant(gather_rows(X_, idx));
    Rng noise_rng(derive_seed(derive_seed(cfg_.seed, 202), step_));
    const Tensor noise = gaussian_noise(idx.size(), model_.latent_dim(), noise_rng);

    std::optional<BatchTeacher> bt;
    if (cfg_.align.method != AlignMethod::none) {
      BatchTeacher t;
      for (auto i : idx) {
        t.rho.push_back(teacher_->rho[i]);
        t.sigma.push_back(teacher_->sigma[i]);
      }
      if (cfg_.align.method == AlignMethod::flow) t.projections = gather_rows(U_, idx);
      bt = std::move(t);
    }

    vae_opt_.zero_grad();
    if (!flow_opt_.params().empty()) flow_opt_.zero_grad();
    LossTerms terms = total_loss(x, noise, model_, flow_, bt, cfg_.align, sched);
    ad::backward(terms.total);
    vae_opt_.step();
    if (!flow_opt_.params().empty()) flow_opt_.step();
    return terms;
  }

 private:
  VaeModel& model_;
  FlowModel* flow_;
  const RowMatrix& X_;
  const DensityEstimate* teacher_;
  TrainConfig cfg_;
  RowMatrix U_;
  ad::Adam vae_opt_;
  ad::Adam flow_opt_;
  std::size_t epoch_ = 0;
  std::size_t batch_in_epoch_ = 0;
  std::uint64_t step_ = 0;
  std::vector<std::size_t> perm_;
  std::optional<std::size_t> perm_epoch_;
};

}  // namespace divae
