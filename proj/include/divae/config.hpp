#pragma once

#include <charconv>
#include <cstdint>
#include <cstdio>
#include <filesystem>
#include <fstream>
#include <functional>
#include <sstream>
#include <string>
#include <string_view>
#include <vector>

#include "divae/align.hpp"
#include "divae/density.hpp"
#include "divae/errors.hpp"
#include "divae/vae.hpp"

namespace divae {

enum class DatasetKind : std::uint8_t { synthetic = 0, mnist = 1, fashion = 2 };

inline std::string_view to_string(DatasetKind k) {
  switch (k) {
    case DatasetKind::synthetic: return "synthetic";
    case DatasetKind::mnist: return "mnist";
    case DatasetKind::fashion: return "fashion";
  }
  return "?";
}

inline DatasetKind parse_dataset_kind(std::string_view s) {
  if (s == "synthetic") return DatasetKind::synthetic;
  if (s == "mnist") return DatasetKind::mnist;
  if (s == "fashion") return DatasetKind::fashion;
  throw ContractViolation("unknown dataset '" + std::string(s) + "'");
}

struct ExperimentConfig {
  // dataset
  DatasetKind dataset = DatasetKind::synthetic;
  std::size_t k = 4;
  std::size_t dim = 50;
  double sigma_pad = 0.02;
  double radius = 5.0;
  double component_var = 0.4;
  std::size_t n_train = 60000;
  std::size_t n_val = 10000;
  std::uint64_t data_seed = 0;
  std::size_t ood_k = 8;
  std::uint64_t ood_data_seed = 1;
  std::string data_dir;  // IDX files; empty means $DIVAE_DATA_DIR

  // teacher
  Estimator teacher = Estimator::knn_adaptive;
  std::size_t teacher_dim = 0;  // 0: latent_dim
  std::size_t knn_k_max = 64;
  double knn_z = 2.0;
  double kde_bandwidth = 0.0;  // 0: Silverman

  // model
  std::vector<PriorKind> priors{PriorKind::standard, PriorKind::gmm, PriorKind::vamp};
  std::vector<AlignMethod> methods{AlignMethod::none, AlignMethod::direct, AlignMethod::flow};
  std::size_t latent_dim = 2;
  std::size_t hidden_dim = 0;  // 0: D/2
  Activation activation = Activation::tanh;
  double sigma_x = 0.02;
  std::size_t prior_components = 0;  // 0: k for synthetic data, 10 otherwise
  double logvar_clamp = 10.0;

  // training
  std::size_t epochs = 100;
  std::size_t batch = 128;
  double lr = 1e-3;
  double delta = 1.0;
  bool detach_encoder = false;
  double kl_start = 0.1;
  double kl_end = 1.0;
  double kl_warmup_fraction = 0.5;

  // flow
  std::size_t flow_layers = 5;
  std::size_t flow_hidden = 16;
  double flow_scale_bound = 2.0;

  // evaluation
  std::uint64_t eval_seed = 12345;
  std::size_t n_mc_coverage = 100000;
  std::size_t n_mc_posterior = 128;

  std::vector<std::uint64_t> seeds{0, 1, 2};
  std::string out = "runs";

  friend bool operator==(const ExperimentConfig&, const ExperimentConfig&) = default;

  std::size_t input_dim() const noexcept { return dataset == DatasetKind::synthetic ? dim : 784; }
  std::size_t resolved_hidden() const noexcept {
    if (hidden_dim > 0) return hidden_dim;
    return dataset == DatasetKind::synthetic ? std::max<std::size_t>(1, dim / 2) : 300;
  }
  std::size_t resolved_prior_components() const noexcept {
    if (prior_components > 0) return prior_components;
    return dataset == DatasetKind::synthetic ? k : 10;
  }
  std::size_t resolved_teacher_dim() const noexcept { return teacher_dim > 0 ? teacher_dim : latent_dim; }
};

namespace config_detail {

inline std::string trim(std::string_view s) {
  const auto b = s.find_first_not_of(" \t\r");
  if (b == std::string_view::npos) return {};
  const auto e = s.find_last_not_of(" \t\r");
  return std::string(s.substr(b, e - b + 1));
}

inline std::vector<std::string> split_list(std::string_view s) {
  std::vector<std::string> out;
  std::size_t start = 0;
  while (start <= s.size()) {
    const auto comma = s.find(',', start);
    const auto end = comma == std::string_view::npos ? s.size() : comma;
    out.push_back(trim(s.substr(start, end - start)));
    if (comma == std::string_view::npos) break;
    start = comma + 1;
  }
  return out;
}

inline std::string fmt_double(double v) {
  char buf[64];
  std::snprintf(buf, sizeof buf, "%.17g", v);
  return buf;
}

inline double parse_double(const std::string& s) {
  std::size_t pos = 0;
  double v = 0.0;
  try {
    v = std::stod(s, &pos);
  } catch (const std::exception&) {
    throw ContractViolation("not a number: '" + s + "'");
  }
  if (pos != s.size()) throw ContractViolation("not a number: '" + s + "'");
  return v;
}

inline std::uint64_t parse_uint(const std::string& s) {
  std::uint64_t v = 0;
  const auto [p, ec] = std::from_chars(s.data(), s.data() + s.size(), v);
  if (ec != std::errc() || p != s.data() + s.size()) throw ContractViolation("not a non-negative integer: '" + s + "'");
  return v;
}

inline bool parse_bool(const std::string& s) {
  if (s == "true" || s == "1") return true;
  if (s == "false" || s == "0") return false;
  throw ContractViolation("not a boolean: '" + s + "'");
}

struct Field {
  std::string_view key;
  std::function<std::string(const ExperimentConfig&)> get;
  std::function<void(ExperimentConfig&, const std::string&)> set;
};

template <class T>
Field size_field(std::string_view key, T ExperimentConfig::*m) {
  return {key, [m](const ExperimentConfig& c) { return std::to_string(c.*m); },
          [m](ExperimentConfig& c, const std::string& v) { c.*m = static_cast<T>(parse_uint(v)); }};
}

inline Field double_field(std::string_view key, double ExperimentConfig::*m) {
  return {key, [m](const ExperimentConfig& c) { return fmt_double(c.*m); },
          [m](ExperimentConfig& c, const std::string& v) { c.*m = parse_double(v); }};
}

template <class E, class Parse>
Field list_field(std::string_view key, std::vector<E> ExperimentConfig::*m, Parse parse) {
  return {key,
          [m](const ExperimentConfig& c) {
            std::string s;
            for (std::size_t i = 0; i < (c.*m).size(); ++i) {
              if (i) s += ',';
              s += std::string(to_string((c.*m)[i]));
            }
            return s;
          },
          [m, parse](ExperimentConfig& c, const std::string& v) {
            std::vector<E> out;
            for (const auto& item : split_list(v)) out.push_back(parse(item));
            c.*m = std::move(out);
          }};
}

inline const std::vector<Field>& fields() {
  using C = ExperimentConfig;
  static const std::vector<Field> f = {
      {"dataset", [](const C& c) { return std::string(to_string(c.dataset)); },
       [](C& c, const std::string& v) { c.dataset = parse_dataset_kind(v); }},
      size_field("k", &C::k),
      size_field("dim", &C::dim),
      double_field("sigma_pad", &C::sigma_pad),
      double_field("radius", &C::radius),
      double_field("component_var", &C::component_var),
      size_field("n_train", &C::n_train),
      size_field("n_val", &C::n_val),
      size_field("data_seed", &C::data_seed),
      size_field("ood_k", &C::ood_k),
      size_field("ood_data_seed", &C::ood_data_seed),
      {"data_dir", [](const C& c) { return c.data_dir; }, [](C& c, const std::string& v) { c.data_dir = v; }},
      {"teacher", [](const C& c) { return std::string(to_string(c.teacher)); },
       [](C& c, const std::string& v) { c.teacher = parse_estimator(v); }},
      size_field("teacher_dim", &C::teacher_dim),
      size_field("knn_k_max", &C::knn_k_max),
      double_field("knn_z", &C::knn_z),
      double_field("kde_bandwidth", &C::kde_bandwidth),
      list_field("prior", &C::priors, [](const std::string& s) { return parse_prior(s); }),
      list_field("method", &C::methods, [](const std::string& s) { return parse_method(s); }),
      size_field("latent_dim", &C::latent_dim),
      size_field("hidden_dim", &C::hidden_dim),
      {"hidden_activation", [](const C& c) { return std::string(to_string(c.activation)); },
       [](C& c, const std::string& v) { c.activation = parse_activation(v); }},
      double_field("sigma_x", &C::sigma_x),
      size_field("prior_components", &C::prior_components),
      double_field("logvar_clamp", &C::logvar_clamp),
      size_field("epochs", &C::epochs),
      size_field("batch", &C::batch),
      double_field("lr", &C::lr),
      double_field("delta", &C::delta),
      {"detach_encoder", [](const C& c) { return std::string(c.detach_encoder ? "true" : "false"); },
       [](C& c, const std::string& v) { c.detach_encoder = parse_bool(v); }},
      double_field("kl_start", &C::kl_start),
      double_field("kl_end", &C::kl_end),
      double_field("kl_warmup_fraction", &C::kl_warmup_fraction),
      size_field("flow_layers", &C::flow_layers),
      size_field("flow_hidden", &C::flow_hidden),
      double_field("flow_scale_bound", &C::flow_scale_bound),
      size_field("eval_seed", &C::eval_seed),
      size_field("n_mc_coverage", &C::n_mc_coverage),
      size_field("n_mc_posterior", &C::n_mc_posterior),
      {"seeds",
       [](const C& c) {
         std::string s;
         for (std::size_t i = 0; i < c.seeds.size(); ++i) s += (i ? "," : "") + std::to_string(c.seeds[i]);
         return s;
       },
       [](C& c, const std::string& v) {
         c.seeds.clear();
         for (const auto& item : split_list(v)) c.seeds.push_back(parse_uint(item));
       }},
      {"out", [](const C& c) { return c.out; }, [](C& c, const std::string& v) { c.out = v; }},
  };
  return f;
}

inline const Field* find_field(std::string_view key) {
  for (const auto& f : fields())
    if (f.key == key) return &f;
  return nullptr;
}

}  // namespace config_detail

/// Every semantic problem with a config, one message per field.
inline std::vector<std::string> validation_errors(const ExperimentConfig& c) {
  std::vector<std::string> e;
  auto check = [&e](bool ok, const char* msg) {
    if (!ok) e.emplace_back(msg);
  };
  const bool synth = c.dataset == DatasetKind::synthetic;
  if (synth) {
    check(c.k >= 1, "k: must be >= 1");
    check(c.dim >= 2, "dim: must be >= 2");
    check(c.ood_k >= 1, "ood_k: must be >= 1");
    check(c.radius >= 0.0, "radius: must be >= 0");
    check(c.component_var > 0.0, "component_var: must be positive");
    check(c.sigma_pad > 0.0, "sigma_pad: must be positive");
    check(c.latent_dim == 2 || c.teacher != Estimator::oracle, "teacher: oracle teacher needs latent_dim = 2");
  } else {
    check(c.teacher != Estimator::oracle, "teacher: oracle teacher needs a synthetic dataset");
  }
  check(c.n_train >= 2, "n_train: must be >= 2");
  check(c.n_val >= 1, "n_val: must be >= 1");
  check(c.resolved_teacher_dim() <= c.input_dim(), "teacher_dim: exceeds the data dimension");
  check(c.teacher != Estimator::knn_adaptive || c.knn_k_max >= 4, "knn_k_max: must be >= 4");
  check(c.teacher != Estimator::knn_adaptive || c.knn_k_max < c.n_train, "knn_k_max: must be < n_train");
  check(c.knn_z > 0.0, "knn_z: must be positive");
  check(c.kde_bandwidth >= 0.0, "kde_bandwidth: must be >= 0 (0 selects Silverman)");
  check(!c.priors.empty(), "prior: list is empty");
  check(!c.methods.empty(), "method: list is empty");
  check(c.latent_dim >= 1, "latent_dim: must be >= 1");
  bool need_flow = false;
  for (auto m : c.methods) need_flow = need_flow || m == AlignMethod::flow;
  check(!need_flow || c.latent_dim >= 2, "latent_dim: the flow method needs latent_dim >= 2");
  check(!need_flow || c.resolved_teacher_dim() == c.latent_dim,
        "teacher_dim: the flow method needs teacher_dim equal to latent_dim");
  check(c.sigma_x > 0.0, "sigma_x: must be positive");
  check(c.logvar_clamp > 0.0, "logvar_clamp: must be positive");
  check(c.epochs >= 1, "epochs: must be >= 1");
  check(c.batch >= 1, "batch: must be >= 1");
  check(c.lr >= 0.0, "lr: must be >= 0");
  check(c.delta > 0.0, "delta: must be positive");
  check(c.kl_warmup_fraction >= 0.0 && c.kl_warmup_fraction <= 1.0, "kl_warmup_fraction: must lie in [0,1]");
  check(c.flow_layers >= 1, "flow_layers: must be >= 1");
  check(c.flow_hidden >= 1, "flow_hidden: must be >= 1");
  check(c.flow_scale_bound > 0.0, "flow_scale_bound: must be positive");
  check(c.n_mc_coverage >= 2, "n_mc_coverage: must be >= 2");
  check(c.n_mc_posterior >= 1, "n_mc_posterior: must be >= 1");
  check(!c.seeds.empty(), "seeds: list is empty");
  check(!c.out.empty(), "out: must not be empty");
  return e;
}

inline void validate(const ExperimentConfig& c) {
  const auto errs = validation_errors(c);
  if (errs.empty()) return;
  std::string msg = "invalid config:";
  for (const auto& e : errs) msg += "\n  " + e;
  throw ConfigError(msg);
}

/// Applies one `key = value` assignment. Parse failures become ConfigError.
inline void set_config_value(ExperimentConfig& c, std::string_view key, const std::string& value) {
  const auto* f = config_detail::find_field(key);
  if (f == nullptr) throw ConfigError("unknown config key '" + std::string(key) + "'");
  try {
    f->set(c, value);
  } catch (const ContractViolation& e) {
    throw ConfigError(std::string(key) + ": " + e.what());
  }
}

/// Parses the flat text form on top of `base`. Collects every error before throwing.
inline ExperimentConfig parse_config(std::string_view text, ExperimentConfig base = {}) {
  std::vector<std::string> errs;
  std::istringstream in{std::string(text)};
  std::string line;
  std::size_t lineno = 0;
  while (std::getline(in, line)) {
    ++lineno;
    if (const auto hash = line.find('#'); hash != std::string::npos) line.erase(hash);
    const std::string t = config_detail::trim(line);
    if (t.empty()) continue;
    const auto eq = t.find('=');
    if (eq == std::string::npos) {
      errs.push_back("line " + std::to_string(lineno) + ": expected 'key = value'");
      continue;
    }
    const std::string key = config_detail::trim(std::string_view(t).substr(0, eq));
    const std::string value = config_detail::trim(std::string_view(t).substr(eq + 1));
    try {
      set_config_value(base, key, value);
    } catch (const ConfigError& e) {
      errs.push_back("line " + std::to_string(lineno) + ": " + e.what());
    }
  }
  if (!errs.empty()) {
    std::string msg = "config parse errors:";
    for (const auto& e : errs) msg += "\n  " + e;
    throw ConfigError(msg);
  }
  return base;
}

inline std::string config_to_text(const ExperimentConfig& c) {
  std::string s;
  for (const auto& f : config_detail::fields()) s += std::string(f.key) + " = " + f.get(c) + "\n";
  return s;
}

inline ExperimentConfig load_config(const std::filesystem::path& path, ExperimentConfig base = {}) {
  std::ifstream in(path);
  if (!in) throw ConfigError("cannot read config '" + path.string() + "'");
  std::stringstream ss;
  ss << in.rdbuf();
  return parse_config(ss.str(), std::move(base));
}

/// Named starting points. `full` is the full protocol; `desk` is the reduced
/// synthetic run used by the acceptance suite.
inline ExperimentConfig preset(std::string_view name) {
  ExperimentConfig c;
  if (name == "full") return c;
  if (name == "desk") {
    c.n_train = 10000;
    c.n_val = 2000;
    c.epochs = 30;
    c.batch = 32;
    c.n_mc_coverage = 20000;
    return c;
  }
  if (name == "mnist") {
    c.dataset = DatasetKind::mnist;
    c.latent_dim = 10;
    c.teacher = Estimator::knn_adaptive;
    c.priors = {PriorKind::gmm};
    c.methods = {AlignMethod::none, AlignMethod::direct};
    c.epochs = 20;
    c.n_train = 60000;
    c.n_val = 10000;
    return c;
  }
  throw ConfigError("unknown preset '" + std::string(name) + "' (expected desk, full or mnist)");
}

}  // namespace divae
