#pragma once

#include <atomic>
#include <chrono>
#include <cstdio>
#include <cstdlib>
#include <filesystem>
#include <fstream>
#include <map>
#include <mutex>
#include <optional>
#include <sstream>
#include <string>
#include <thread>
#include <vector>

#include "divae/config.hpp"
#include "divae/io.hpp"
#include "divae/metrics.hpp"
#include "divae/train.hpp"

#ifndef DIVAE_GIT_DESCRIBE
#define DIVAE_GIT_DESCRIBE "unknown"
#endif

namespace divae {

namespace fs = std::filesystem;

/// Missing input from an earlier stage.
class StageError : public std::runtime_error {
 public:
  using std::runtime_error::runtime_error;
};

// ---------------------------------------------------------------------------
// Paths

struct RunPaths {
  fs::path root;

  fs::path data_dir() const { return root / "data"; }
  fs::path train_data() const { return data_dir() / "train.divd"; }
  fs::path val_data() const { return data_dir() / "val.divd"; }
  fs::path ood_data() const { return data_dir() / "ood_val.divd"; }
  fs::path teacher() const { return root / "teacher.divr"; }
  fs::path config() const { return root / "config.txt"; }
  fs::path manifest() const { return root / "manifest.txt"; }
  fs::path metrics_csv() const { return root / "metrics.csv"; }
  fs::path ood_csv() const { return root / "ood.csv"; }
  fs::path timing_csv() const { return root / "timing.csv"; }
  fs::path report_csv() const { return root / "report.csv"; }

  fs::path cell_dir(PriorKind p, AlignMethod m, std::uint64_t seed) const {
    return root / "cells" / (std::string(to_string(p)) + "-" + std::string(to_string(m)) + "-s" + std::to_string(seed));
  }
};

inline void require_stage(const fs::path& p, std::string_view stage) {
  if (!fs::exists(p))
    throw StageError("missing '" + p.string() + "': run `divae " + std::string(stage) + "` first");
}

// ---------------------------------------------------------------------------
// Formatting

inline std::string fmt(double v) {
  char buf[64];
  std::snprintf(buf, sizeof buf, "%.17g", v);
  return buf;
}

inline std::string hex64(std::uint64_t v) {
  char buf[32];
  std::snprintf(buf, sizeof buf, "%016llx", static_cast<unsigned long long>(v));
  return buf;
}

inline std::uint64_t hash_bytes(std::span<const std::uint8_t> b, std::uint64_t h = 0xcbf29ce484222325ULL) {
  return fnv1a64(b.data(), b.size(), h);
}

inline std::uint64_t hash_text(std::string_view s, std::uint64_t h = 0xcbf29ce484222325ULL) {
  return fnv1a64(s.data(), s.size(), h);
}

// ---------------------------------------------------------------------------
// Data

struct DataBundle {
  Dataset train;
  Dataset val;
  std::optional<Dataset> ood;  // validation split of the shifted generator
};

inline Gmm2dSpec synthetic_spec(const ExperimentConfig& c, std::size_t k) {
  return Gmm2dSpec::circle(k, c.radius, c.component_var);
}

inline fs::path resolve_data_dir(const ExperimentConfig& c) {
  if (!c.data_dir.empty()) return c.data_dir;
  if (const char* env = std::getenv("DIVAE_DATA_DIR")) return env;
  return "data";
}

inline const char* kIdxFiles[4] = {"train-images-idx3-ubyte", "train-labels-idx1-ubyte", "t10k-images-idx3-ubyte",
                                   "t10k-labels-idx1-ubyte"};

inline std::string fetch_instructions(const ExperimentConfig& c, const fs::path& dir) {
  const bool fashion = c.dataset == DatasetKind::fashion;
  std::string s = "IDX files for " + std::string(fashion ? "FashionMNIST" : "MNIST") + " not found in '" +
                  dir.string() + "'.\nDownload and gunzip these files into that directory:\n";
  for (const char* f : kIdxFiles) s += "  " + std::string(f) + "\n";
  s += fashion ? "from https://github.com/zalandoresearch/fashion-mnist (data/fashion)\n"
               : "from a public MNIST mirror, e.g. https://storage.googleapis.com/cvdf-datasets/mnist/\n";
  s += "then set DIVAE_DATA_DIR or the data_dir config key.";
  return s;
}

inline bool idx_available(const ExperimentConfig& c) {
  const fs::path dir = resolve_data_dir(c);
  for (const char* f : kIdxFiles)
    if (!fs::exists(dir / f)) return false;
  return true;
}

inline Dataset idx_dataset(const fs::path& images, const fs::path& labels, std::size_t limit, Split split) {
  const io::IdxImages img = io::load_idx_images(images);
  const std::vector<int> lab = io::load_idx_labels(labels);
  if (lab.size() != img.count)
    throw FormatError(FormatError::Kind::parse, "IDX label count does not match image count");
  const std::size_t n = std::min(limit, img.count);
  Dataset ds;
  ds.split = split;
  ds.X = img.pixels.topRows(static_cast<Eigen::Index>(n));
  ds.labels.assign(lab.begin(), lab.begin() + static_cast<std::ptrdiff_t>(n));
  return ds;
}

/// Builds or loads every dataset the config needs.
inline DataBundle make_data(const ExperimentConfig& c) {
  DataBundle b;
  if (c.dataset == DatasetKind::synthetic) {
    auto [tr, va] = build_dataset(synthetic_spec(c, c.k), c.dim, c.sigma_pad, c.n_train, c.n_val, c.data_seed);
    b.train = std::move(tr);
    b.val = std::move(va);
    // Shifted generator: a separate dataset with more modes and its own rotation.
    auto [otr, ova] = build_dataset(synthetic_spec(c, c.ood_k), c.dim, c.sigma_pad, 1, c.n_val, c.ood_data_seed);
    b.ood = std::move(ova);
    return b;
  }
  const fs::path dir = resolve_data_dir(c);
  if (!idx_available(c)) throw StageError(fetch_instructions(c, dir));
  b.train = idx_dataset(dir / kIdxFiles[0], dir / kIdxFiles[1], c.n_train, Split::train);
  b.val = idx_dataset(dir / kIdxFiles[2], dir / kIdxFiles[3], c.n_val, Split::val);
  return b;
}

inline void save_data(const RunPaths& p, const DataBundle& b) {
  io::save_dataset(p.train_data(), b.train);
  io::save_dataset(p.val_data(), b.val);
  if (b.ood) io::save_dataset(p.ood_data(), *b.ood);
}

inline DataBundle load_data(const RunPaths& p) {
  require_stage(p.train_data(), "gen-data");
  require_stage(p.val_data(), "gen-data");
  DataBundle b;
  b.train = io::load_dataset(p.train_data());
  b.val = io::load_dataset(p.val_data());
  if (fs::exists(p.ood_data())) b.ood = io::load_dataset(p.ood_data());
  return b;
}

// ---------------------------------------------------------------------------
// Teacher

inline DensityEstimate make_teacher(const ExperimentConfig& c, const Dataset& train) {
  if (c.teacher == Estimator::oracle) return oracle_teacher(train);
  KnnOptions knn;
  knn.k_max = c.knn_k_max;
  knn.z = c.knn_z;
  return estimate_density(train.X, c.resolved_teacher_dim(), c.teacher, knn, c.kde_bandwidth);
}

/// Log-density vector the model's s-values are compared against on `val`.
/// Synthetic: the generator's ancestor density. Real data: teacher ρ on the
/// training set (the only external density available).
inline std::vector<double> evaluation_reference(const Dataset& val, const DensityEstimate& teacher) {
  if (val.is_synthetic()) return ancestor_logpdf_all(val);
  return teacher.rho;
}

// ---------------------------------------------------------------------------
// Models

inline VaeConfig vae_config(const ExperimentConfig& c, PriorKind prior) {
  VaeConfig v;
  v.input_dim = c.input_dim();
  v.hidden_dim = c.resolved_hidden();
  v.latent_dim = c.latent_dim;
  v.decoder = c.dataset == DatasetKind::synthetic ? DecoderKind::gaussian : DecoderKind::bernoulli;
  v.sigma_x = c.sigma_x;
  v.activation = c.activation;
  v.prior = prior;
  v.prior_components = c.resolved_prior_components();
  v.logvar_clamp = c.logvar_clamp;
  return v;
}

inline FlowConfig flow_config(const ExperimentConfig& c) {
  FlowConfig f;
  f.dim = c.latent_dim;
  f.layers = c.flow_layers;
  f.hidden = c.flow_hidden;
  f.scale_bound = c.flow_scale_bound;
  return f;
}

inline TrainConfig train_config(const ExperimentConfig& c, AlignMethod m, std::uint64_t seed) {
  TrainConfig t;
  t.epochs = c.epochs;
  t.batch = c.batch;
  t.lr = c.lr;
  t.seed = derive_seed(seed, 3);
  t.align.method = m;
  t.align.delta = c.delta;
  t.align.detach_encoder = c.detach_encoder;
  t.align.kl_start = c.kl_start;
  t.align.kl_end = c.kl_end;
  t.align.kl_warmup_fraction = c.kl_warmup_fraction;
  return t;
}

/// Model, optional flow, and trainer for one (prior, method, seed) cell.
struct Cell {
  PriorKind prior{};
  AlignMethod method{};
  std::uint64_t seed = 0;
  VaeModel model;
  std::optional<FlowModel> flow;
  std::optional<Trainer> trainer;

  Cell() = default;
  Cell(const Cell&) = delete;
  Cell& operator=(const Cell&) = delete;
};

/// Fresh cell. Held by pointer because the trainer references the model.
inline std::unique_ptr<Cell> make_cell(const ExperimentConfig& c, PriorKind prior, AlignMethod method,
                                       std::uint64_t seed, const Dataset& train, const DensityEstimate* teacher) {
  auto cell = std::make_unique<Cell>();
  cell->prior = prior;
  cell->method = method;
  cell->seed = seed;
  cell->model = VaeModel(vae_config(c, prior), derive_seed(seed, 1));
  if (prior == PriorKind::vamp) cell->model.init_pseudo_inputs(train.X, derive_seed(seed, 4));
  if (method == AlignMethod::flow) cell->flow.emplace(flow_config(c), derive_seed(seed, 2));
  cell->trainer.emplace(cell->model, cell->flow ? &*cell->flow : nullptr, train.X,
                        method == AlignMethod::none ? nullptr : teacher, train_config(c, method, seed));
  return cell;
}

// ---------------------------------------------------------------------------
// Checkpoints

inline void put_adam(io::Checkpoint& ck, const std::string& prefix, const ad::Adam& opt, const ParamSet& ps) {
  const auto& st = opt.state();
  ck.meta[prefix + ".t"] = std::to_string(st.t);
  for (std::size_t i = 0; i < st.m.size(); ++i) {
    const std::string& name = ps.items()[i].first;
    ck.tensors.emplace_back(prefix + ".m/" + name, st.m[i]);
    ck.tensors.emplace_back(prefix + ".v/" + name, st.v[i]);
  }
}

inline void get_adam(const io::Checkpoint& ck, const std::string& prefix, ad::Adam& opt, const ParamSet& ps) {
  auto& st = opt.state();
  st.t = std::stoll(ck.get(prefix + ".t"));
  st.m.clear();
  st.v.clear();
  if (st.t == 0) return;
  for (const auto& [name, v] : ps.items()) {
    st.m.push_back(ck.tensor(prefix + ".m/" + name));
    st.v.push_back(ck.tensor(prefix + ".v/" + name));
    if (st.m.back().shape() != v.value().shape() || st.v.back().shape() != v.value().shape())
      throw FormatError(FormatError::Kind::parse, "checkpoint: optimizer state shape mismatch for '" + name + "'");
  }
}

inline io::Checkpoint make_checkpoint(const ExperimentConfig& c, const Cell& cell) {
  io::Checkpoint ck;
  ck.meta["config"] = config_to_text(c);
  ck.meta["prior"] = std::string(to_string(cell.prior));
  ck.meta["method"] = std::string(to_string(cell.method));
  ck.meta["seed"] = std::to_string(cell.seed);
  const Trainer& tr = *cell.trainer;
  ck.meta["epoch"] = std::to_string(tr.epoch());
  ck.meta["batch_in_epoch"] = std::to_string(tr.batch_in_epoch());
  ck.meta["step"] = std::to_string(tr.global_step());
  for (const auto& [name, v] : cell.model.params().items()) ck.tensors.emplace_back(name, v.value());
  auto& mtr = const_cast<Trainer&>(tr);
  put_adam(ck, "adam.vae", mtr.vae_optimizer(), cell.model.params());
  if (cell.flow) {
    for (const auto& [name, v] : cell.flow->params().items()) ck.tensors.emplace_back(name, v.value());
    put_adam(ck, "adam.flow", mtr.flow_optimizer(), cell.flow->params());
  }
  return ck;
}

inline void load_params(const io::Checkpoint& ck, const ParamSet& ps) {
  for (const auto& [name, v] : ps.items()) {
    const ad::Tensor& t = ck.tensor(name);
    if (t.shape() != v.value().shape())
      throw FormatError(FormatError::Kind::parse, "checkpoint: shape mismatch for '" + name + "'");
    Var p = v;
    p.mutable_value() = t;
  }
}

/// Rebuilds a cell from a checkpoint so training can continue exactly.
inline std::unique_ptr<Cell> restore_cell(const io::Checkpoint& ck, const ExperimentConfig& c, const Dataset& train,
                                          const DensityEstimate* teacher) {
  const PriorKind prior = parse_prior(ck.get("prior"));
  const AlignMethod method = parse_method(ck.get("method"));
  const std::uint64_t seed = std::stoull(ck.get("seed"));
  auto cell = make_cell(c, prior, method, seed, train, teacher);
  load_params(ck, cell->model.params());
  get_adam(ck, "adam.vae", cell->trainer->vae_optimizer(), cell->model.params());
  if (cell->flow) {
    load_params(ck, cell->flow->params());
    get_adam(ck, "adam.flow", cell->trainer->flow_optimizer(), cell->flow->params());
  }
  cell->trainer->set_position(std::stoull(ck.get("epoch")), std::stoull(ck.get("batch_in_epoch")),
                              std::stoull(ck.get("step")));
  return cell;
}

// ---------------------------------------------------------------------------
// CSV

inline const char* kEpochHeader = "epoch,elbo,neg_elbo,align_loss,flow_ml,gamma,kl_factor,batches,seconds_epoch,seconds_per_batch";

inline std::string epoch_row(const EpochRecord& r) {
  return std::to_string(r.epoch) + "," + fmt(r.elbo) + "," + fmt(r.neg_elbo) + "," + fmt(r.align) + "," +
         fmt(r.flow_ml) + "," + fmt(r.gamma) + "," + fmt(r.kl_factor) + "," + std::to_string(r.batches) + "," +
         fmt(r.seconds_epoch) + "," + fmt(r.seconds_per_batch);
}

inline const char* kMetricsHeader =
    "prior,method,seed,n,elbo_mean,elbo_std,s_mean,s_std,ref_mean,ref_std,ks,w,coverage_kl,coverage_kl_se,"
    "kl_q_p2,entropy,kl_prior,model_hash,eval_seed,n_mc_coverage,n_mc_posterior";

inline std::string metrics_row(PriorKind p, AlignMethod m, std::uint64_t seed, const MetricsReport& r) {
  return std::string(to_string(p)) + "," + std::string(to_string(m)) + "," + std::to_string(seed) + "," +
         std::to_string(r.n) + "," + fmt(r.elbo.mean) + "," + fmt(r.elbo.std) + "," + fmt(r.s.mean) + "," +
         fmt(r.s.std) + "," + fmt(r.reference.mean) + "," + fmt(r.reference.std) + "," + fmt(r.ks) + "," +
         fmt(r.w) + "," + fmt(r.coverage_kl) + "," + fmt(r.coverage_kl_se) + "," + fmt(r.kl_q_p2) + "," +
         fmt(r.entropy) + "," + fmt(r.kl_prior) + "," + hex64(r.model_hash) + "," + std::to_string(r.eval_seed) +
         "," + std::to_string(r.n_mc_coverage) + "," + std::to_string(r.n_mc_posterior);
}

inline const char* kOodHeader =
    "prior,method,seed,in_elbo,ood_elbo,d_elbo,in_s,ood_s,d_s,in_kl_prior,ood_kl_prior,d_kl,in_entropy,ood_entropy,"
    "d_entropy,ood_kl_q_p2";

inline std::string ood_row(PriorKind p, AlignMethod m, std::uint64_t seed, const MetricsReport& in,
                           const MetricsReport& ood) {
  const OodShifts d = ood_shifts(in, ood);
  return std::string(to_string(p)) + "," + std::string(to_string(m)) + "," + std::to_string(seed) + "," +
         fmt(in.elbo.mean) + "," + fmt(ood.elbo.mean) + "," + fmt(d.d_elbo) + "," + fmt(in.s.mean) + "," +
         fmt(ood.s.mean) + "," + fmt(d.d_s) + "," + fmt(in.kl_prior) + "," + fmt(ood.kl_prior) + "," + fmt(d.d_kl) +
         "," + fmt(in.entropy) + "," + fmt(ood.entropy) + "," + fmt(d.d_entropy) + "," + fmt(ood.kl_q_p2);
}

inline std::string latents_csv(const PointMetrics& pm, std::span<const double> reference, const std::vector<int>& labels) {
  std::ostringstream os;
  const auto d = pm.z.cols();
  os << "index,label";
  for (Eigen::Index j = 0; j < d; ++j) os << ",z" << j;
  for (Eigen::Index j = 0; j < d; ++j) os << ",mu" << j;
  os << ",s,reference,elbo\n";
  for (Eigen::Index i = 0; i < pm.z.rows(); ++i) {
    os << i << ',' << (static_cast<std::size_t>(i) < labels.size() ? labels[static_cast<std::size_t>(i)] : -1);
    for (Eigen::Index j = 0; j < d; ++j) os << ',' << fmt(pm.z(i, j));
    for (Eigen::Index j = 0; j < d; ++j) os << ',' << fmt(pm.mu(i, j));
    const auto u = static_cast<std::size_t>(i);
    os << ',' << fmt(pm.s[u]) << ',' << (u < reference.size() ? fmt(reference[u]) : std::string("nan")) << ','
       << fmt(pm.elbo[u]) << '\n';
  }
  return os.str();
}

/// Minimal reader for the CSVs written above (no quoting needed).
struct CsvTable {
  std::vector<std::string> header;
  std::vector<std::vector<std::string>> rows;

  std::size_t col(std::string_view name) const {
    for (std::size_t i = 0; i < header.size(); ++i)
      if (header[i] == name) return i;
    throw FormatError(FormatError::Kind::parse, "csv: missing column '" + std::string(name) + "'");
  }
  double num(std::size_t row, std::string_view name) const { return std::stod(rows[row][col(name)]); }
  const std::string& str(std::size_t row, std::string_view name) const { return rows[row][col(name)]; }
};

inline CsvTable read_csv(const fs::path& path) {
  std::ifstream in(path);
  if (!in) throw FormatError(FormatError::Kind::io, "cannot open '" + path.string() + "'");
  CsvTable t;
  std::string line;
  auto split = [](const std::string& s) {
    std::vector<std::string> out;
    std::stringstream ss(s);
    std::string item;
    while (std::getline(ss, item, ',')) out.push_back(item);
    return out;
  };
  if (std::getline(in, line)) t.header = split(line);
  while (std::getline(in, line))
    if (!line.empty()) t.rows.push_back(split(line));
  return t;
}

// ---------------------------------------------------------------------------
// Cells

struct CellKey {
  PriorKind prior;
  AlignMethod method;
  std::uint64_t seed;
};

inline std::vector<CellKey> cell_grid(const ExperimentConfig& c) {
  std::vector<CellKey> out;
  for (auto p : c.priors)
    for (auto m : c.methods)
      for (auto s : c.seeds) out.push_back({p, m, s});
  return out;
}

/// Runs `fn` over the cells with up to `jobs` worker threads. Results land in
/// per-cell files, so scheduling does not affect outputs.
template <class Fn>
void for_each_cell(const std::vector<CellKey>& cells, unsigned jobs, Fn fn) {
  if (jobs <= 1 || cells.size() <= 1) {
    for (const auto& k : cells) fn(k);
    return;
  }
  std::atomic<std::size_t> next{0};
  std::exception_ptr error;
  std::mutex mu;
  std::vector<std::thread> pool;
  for (unsigned t = 0; t < std::min<std::size_t>(jobs, cells.size()); ++t) {
    pool.emplace_back([&] {
      for (std::size_t i = next++; i < cells.size(); i = next++) {
        try {
          fn(cells[i]);
        } catch (...) {
          std::lock_guard lock(mu);
          if (!error) error = std::current_exception();
        }
      }
    });
  }
  for (auto& th : pool) th.join();
  if (error) std::rethrow_exception(error);
}

struct TrainSummary {
  std::vector<EpochRecord> epochs;
  double seconds = 0.0;
};

/// Trains one cell from scratch, writing its checkpoint and epoch log.
inline TrainSummary train_cell(const ExperimentConfig& c, const RunPaths& p, const CellKey& key, const Dataset& train,
                               const DensityEstimate& teacher) {
  auto cell = make_cell(c, key.prior, key.method, key.seed, train, &teacher);
  TrainSummary sum;
  std::string log = std::string(kEpochHeader) + "\n";
  const auto t0 = std::chrono::steady_clock::now();
  while (!cell->trainer->finished()) {
    const EpochRecord r = cell->trainer->run_epoch();
    log += epoch_row(r) + "\n";
    sum.epochs.push_back(r);
  }
  sum.seconds = std::chrono::duration<double>(std::chrono::steady_clock::now() - t0).count();
  const fs::path dir = p.cell_dir(key.prior, key.method, key.seed);
  io::save_checkpoint(dir / "model.divm", make_checkpoint(c, *cell));
  io::write_text_atomic(dir / "epochs.csv", log);
  return sum;
}

inline std::unique_ptr<Cell> load_cell(const ExperimentConfig& c, const RunPaths& p, const CellKey& key,
                                       const Dataset& train, const DensityEstimate& teacher) {
  const fs::path ck = p.cell_dir(key.prior, key.method, key.seed) / "model.divm";
  require_stage(ck, "train");
  return restore_cell(io::load_checkpoint(ck), c, train, &teacher);
}

inline EvalOptions eval_options(const ExperimentConfig& c) {
  EvalOptions o;
  o.seed = c.eval_seed;
  o.n_mc_coverage = c.n_mc_coverage;
  o.n_mc_posterior = c.n_mc_posterior;
  return o;
}

struct CellEval {
  MetricsReport in;
  std::optional<MetricsReport> ood;
};

/// Evaluates a trained cell on the validation split (and the OOD split when present).
inline CellEval eval_cell(const ExperimentConfig& c, const RunPaths& p, const CellKey& key, const DataBundle& data,
                          const DensityEstimate& teacher, bool with_ood) {
  auto cell = load_cell(c, p, key, data.train, teacher);
  const auto ref = evaluation_reference(data.val, teacher);
  const Gmm2dSpec* p2 = data.val.is_synthetic() ? &data.val.gen().spec : nullptr;
  PointMetrics pm;
  CellEval out;
  out.in = evaluate(cell->model, data.val.X, ref, p2, eval_options(c), &pm);
  const fs::path dir = p.cell_dir(key.prior, key.method, key.seed);
  io::write_text_atomic(dir / "metrics.csv",
                        std::string(kMetricsHeader) + "\n" + metrics_row(key.prior, key.method, key.seed, out.in) + "\n");
  io::write_text_atomic(dir / "latents.csv", latents_csv(pm, ref, data.val.labels));
  if (with_ood && data.ood) {
    // KL(q, p₂) on the shifted set uses that set's own generator.
    const auto ood_ref = ancestor_logpdf_all(*data.ood);
    out.ood = evaluate(cell->model, data.ood->X, ood_ref, &data.ood->gen().spec, eval_options(c));
    io::write_text_atomic(dir / "ood.csv", std::string(kOodHeader) + "\n" +
                                               ood_row(key.prior, key.method, key.seed, out.in, *out.ood) + "\n");
  }
  return out;
}

/// Concatenates per-cell CSVs in grid order.
inline std::string gather_cell_csv(const RunPaths& p, const std::vector<CellKey>& cells, const char* file,
                                   const char* header) {
  std::string s = std::string(header) + "\n";
  for (const auto& k : cells) {
    const fs::path f = p.cell_dir(k.prior, k.method, k.seed) / file;
    require_stage(f, std::string_view(file) == "ood.csv" ? "ood" : "eval");
    std::ifstream in(f);
    std::string line;
    std::getline(in, line);
    while (std::getline(in, line))
      if (!line.empty()) s += line + "\n";
  }
  return s;
}

// ---------------------------------------------------------------------------
// Timing

struct TimingRow {
  PriorKind prior;
  AlignMethod method;
  double seconds_per_epoch = 0.0;
  double seconds_per_batch = 0.0;
  double ratio_to_none = std::numeric_limits<double>::quiet_NaN();
  std::size_t runs = 0;
};

/// Mean per-epoch wall-clock per (prior, method) from the epoch logs.
inline std::vector<TimingRow> timing_rows(const ExperimentConfig& c, const RunPaths& p) {
  std::vector<TimingRow> rows;
  for (auto pr : c.priors) {
    for (auto m : c.methods) {
      TimingRow r{pr, m};
      double e = 0.0, b = 0.0;
      std::size_t n = 0;
      for (auto s : c.seeds) {
        const fs::path f = p.cell_dir(pr, m, s) / "epochs.csv";
        require_stage(f, "train");
        const CsvTable t = read_csv(f);
        for (std::size_t i = 0; i < t.rows.size(); ++i) {
          e += t.num(i, "seconds_epoch");
          b += t.num(i, "seconds_per_batch");
          ++n;
        }
        ++r.runs;
      }
      r.seconds_per_epoch = n ? e / static_cast<double>(n) : 0.0;
      r.seconds_per_batch = n ? b / static_cast<double>(n) : 0.0;
      rows.push_back(r);
    }
    double base = std::numeric_limits<double>::quiet_NaN();
    for (auto& r : rows)
      if (r.prior == pr && r.method == AlignMethod::none) base = r.seconds_per_epoch;
    for (auto& r : rows)
      if (r.prior == pr) r.ratio_to_none = r.seconds_per_epoch / base;
  }
  return rows;
}

inline std::string timing_csv(const std::vector<TimingRow>& rows) {
  std::string s = "prior,method,runs,seconds_per_epoch,seconds_per_batch,ratio_to_none\n";
  for (const auto& r : rows)
    s += std::string(to_string(r.prior)) + "," + std::string(to_string(r.method)) + "," + std::to_string(r.runs) +
         "," + fmt(r.seconds_per_epoch) + "," + fmt(r.seconds_per_batch) + "," + fmt(r.ratio_to_none) + "\n";
  return s;
}

// ---------------------------------------------------------------------------
// Report

/// Per-seed rows plus one mean/std aggregate row per (prior, method).
inline std::string aggregate_report(const CsvTable& metrics) {
  static const char* cols[] = {"elbo_mean", "s_mean", "ks", "w", "coverage_kl", "kl_q_p2", "entropy", "kl_prior"};
  std::string s = "prior,method,seed";
  for (const char* c : cols) s += std::string(",") + c;
  s += "\n";
  std::vector<std::pair<std::string, std::string>> groups;
  for (std::size_t i = 0; i < metrics.rows.size(); ++i) {
    std::pair<std::string, std::string> g{metrics.str(i, "prior"), metrics.str(i, "method")};
    if (std::find(groups.begin(), groups.end(), g) == groups.end()) groups.push_back(g);
  }
  for (const auto& [prior, method] : groups) {
    std::map<std::string, std::vector<double>> vals;
    for (std::size_t i = 0; i < metrics.rows.size(); ++i) {
      if (metrics.str(i, "prior") != prior || metrics.str(i, "method") != method) continue;
      s += prior + "," + method + "," + metrics.str(i, "seed");
      for (const char* c : cols) {
        s += "," + metrics.str(i, c);
        vals[c].push_back(metrics.num(i, c));
      }
      s += "\n";
    }
    s += prior + "," + method + ",mean";
    for (const char* c : cols) {
      const Stat st = mean_std(vals[c]);
      char buf[96];
      std::snprintf(buf, sizeof buf, ",%.6g±%.3g", st.mean, st.std);
      s += buf;
    }
    s += "\n";
  }
  return s;
}

/// Fixed-width table of the aggregate rows for terminal output.
inline std::string pretty_report(const std::string& report_csv) {
  std::istringstream in(report_csv);
  std::string line;
  std::ostringstream os;
  bool header = true;
  while (std::getline(in, line)) {
    std::stringstream ss(line);
    std::string cell;
    std::vector<std::string> cells;
    while (std::getline(ss, cell, ',')) cells.push_back(cell);
    if (!header && (cells.size() < 3 || cells[2] != "mean")) continue;
    for (std::size_t i = 0; i < cells.size(); ++i) {
      if (i == 2) continue;
      char buf[64];
      std::snprintf(buf, sizeof buf, i < 2 ? "%-9s" : "%20s", cells[i].c_str());
      os << buf;
    }
    os << "\n";
    header = false;
  }
  return os.str();
}

// ---------------------------------------------------------------------------
// Manifest

struct PhaseTime {
  std::string phase;
  double seconds = 0.0;
};

/// Inputs hash: config text, dataset bytes, teacher bytes. Timing is excluded
/// so reruns of the same inputs share a hash.
inline std::uint64_t manifest_hash(const std::string& config_text, std::uint64_t data_hash, std::uint64_t teacher_hash) {
  std::uint64_t h = hash_text(config_text);
  h = fnv1a64(&data_hash, sizeof data_hash, h);
  return fnv1a64(&teacher_hash, sizeof teacher_hash, h);
}

inline std::uint64_t file_hash(const fs::path& f) {
  if (!fs::exists(f)) return 0;
  return hash_bytes(io::read_file(f));
}

inline void write_manifest(const ExperimentConfig& c, const RunPaths& p, const std::vector<PhaseTime>& phases) {
  const std::string cfg = config_to_text(c);
  // The run directory is where results go, not an input.
  ExperimentConfig hashed = c;
  hashed.out = "-";
  std::uint64_t data_hash = 0xcbf29ce484222325ULL;
  for (const auto& f : {p.train_data(), p.val_data(), p.ood_data()}) {
    const std::uint64_t h = file_hash(f);
    data_hash = fnv1a64(&h, sizeof h, data_hash);
  }
  const std::uint64_t teacher_hash = file_hash(p.teacher());
  std::string s;
  s += "manifest_hash = " + hex64(manifest_hash(config_to_text(hashed), data_hash, teacher_hash)) + "\n";
  s += "git_describe = " + std::string(DIVAE_GIT_DESCRIBE) + "\n";
  s += "train_data_hash = " + hex64(file_hash(p.train_data())) + "\n";
  s += "val_data_hash = " + hex64(file_hash(p.val_data())) + "\n";
  s += "ood_data_hash = " + hex64(file_hash(p.ood_data())) + "\n";
  s += "teacher_hash = " + hex64(teacher_hash) + "\n";
  for (const auto& ph : phases) s += "time." + ph.phase + " = " + fmt(ph.seconds) + "\n";
  s += "# config (rerun with: divae run --config config.txt)\n";
  s += cfg;
  io::write_text_atomic(p.manifest(), s);
  io::write_text_atomic(p.config(), cfg);
}


/// All stages in order with no console output (tests and the acceptance run).
inline std::vector<PhaseTime> run_all(const ExperimentConfig& c, unsigned jobs = 1) {
  validate(c);
  const RunPaths p{c.out};
  std::vector<PhaseTime> phases;
  auto t0 = std::chrono::steady_clock::now();
  auto lap = [&](const char* name) {
    const auto t1 = std::chrono::steady_clock::now();
    phases.push_back({name, std::chrono::duration<double>(t1 - t0).count()});
    t0 = t1;
  };
  const DataBundle b = make_data(c);
  save_data(p, b);
  lap("gen_data");
  const DensityEstimate teacher = make_teacher(c, b.train);
  io::save_density(p.teacher(), teacher);
  lap("estimate");
  const auto cells = cell_grid(c);
  for_each_cell(cells, jobs, [&](const CellKey& k) { train_cell(c, p, k, b.train, teacher); });
  lap("train");
  for_each_cell(cells, jobs, [&](const CellKey& k) { eval_cell(c, p, k, b, teacher, b.ood.has_value()); });
  io::write_text_atomic(p.metrics_csv(), gather_cell_csv(p, cells, "metrics.csv", kMetricsHeader));
  if (b.ood) io::write_text_atomic(p.ood_csv(), gather_cell_csv(p, cells, "ood.csv", kOodHeader));
  lap("eval");
  io::write_text_atomic(p.report_csv(), aggregate_report(read_csv(p.metrics_csv())));
  io::write_text_atomic(p.timing_csv(), timing_csv(timing_rows(c, p)));
  write_manifest(c, p, phases);
  return phases;
}

}  // namespace divae
