// divae: command-line driver for the density-informed VAE experiments.

#include <chrono>
#include <cstdio>
#include <iostream>
#include <string>
#include <vector>

#include <CLI11.hpp>

#include "divae/pipeline.hpp"

namespace {

using namespace divae;

enum ExitCode { kOk = 0, kFailure = 1, kConfig = 2, kNumeric = 3 };

struct CommonArgs {
  std::string config;
  std::string preset;
  std::vector<std::uint64_t> seeds;
  std::string out;
  unsigned jobs = 1;
  std::vector<std::string> sets;
};

void add_common(CLI::App* cmd, CommonArgs& a) {
  cmd->add_option("--config", a.config, "flat key = value config file");
  cmd->add_option("--preset", a.preset, "desk | full | mnist");
  cmd->add_option("--seed", a.seeds, "restrict to these seeds");
  cmd->add_option("--out", a.out, "run directory");
  cmd->add_option("--jobs", a.jobs, "parallel cells")->check(CLI::PositiveNumber);
  cmd->add_option("--set", a.sets, "override one key (key=value), repeatable");
}

/// Preset, then config file, then flags. Later stages fall back to the
/// config.txt a previous stage left in the run directory.
ExperimentConfig resolve(const CommonArgs& a) {
  ExperimentConfig c = a.preset.empty() ? ExperimentConfig{} : preset(a.preset);
  if (!a.config.empty()) {
    c = load_config(a.config, c);
  } else if (a.preset.empty() && !a.out.empty() && fs::exists(fs::path(a.out) / "config.txt")) {
    c = load_config(fs::path(a.out) / "config.txt", c);
  }
  for (const auto& kv : a.sets) {
    const auto eq = kv.find('=');
    if (eq == std::string::npos) throw ConfigError("--set expects key=value, got '" + kv + "'");
    set_config_value(c, config_detail::trim(kv.substr(0, eq)), config_detail::trim(kv.substr(eq + 1)));
  }
  if (!a.seeds.empty()) c.seeds = a.seeds;
  if (!a.out.empty()) c.out = a.out;
  validate(c);
  return c;
}

double since(std::chrono::steady_clock::time_point t0) {
  return std::chrono::duration<double>(std::chrono::steady_clock::now() - t0).count();
}

void log(const std::string& s) { std::cerr << s << std::endl; }

DensityEstimate load_teacher(const RunPaths& p) {
  require_stage(p.teacher(), "estimate");
  return io::load_density(p.teacher());
}

void cmd_gen_data(const ExperimentConfig& c, std::vector<PhaseTime>& t) {
  const RunPaths p{c.out};
  const auto t0 = std::chrono::steady_clock::now();
  const DataBundle b = make_data(c);
  save_data(p, b);
  t.push_back({"gen_data", since(t0)});
  log("gen-data: " + std::to_string(b.train.size()) + " train / " + std::to_string(b.val.size()) + " val points, D=" +
      std::to_string(b.train.dim()) + " -> " + p.data_dir().string());
}

void cmd_estimate(const ExperimentConfig& c, std::vector<PhaseTime>& t) {
  const RunPaths p{c.out};
  const DataBundle b = load_data(p);
  const auto t0 = std::chrono::steady_clock::now();
  const DensityEstimate est = make_teacher(c, b.train);
  t.push_back({"estimate", since(t0)});
  io::save_density(p.teacher(), est);
  const Stat r = mean_std(est.rho);
  log("estimate: " + std::string(to_string(est.tag)) + " teacher, mean rho " + fmt(r.mean) + ", fallbacks " +
      std::to_string(est.fallback_count) + " -> " + p.teacher().string());
}

void cmd_train(const ExperimentConfig& c, unsigned jobs, std::vector<PhaseTime>& t) {
  const RunPaths p{c.out};
  const DataBundle b = load_data(p);
  const DensityEstimate teacher = load_teacher(p);
  const auto t0 = std::chrono::steady_clock::now();
  std::mutex mu;
  for_each_cell(cell_grid(c), jobs, [&](const CellKey& k) {
    const TrainSummary s = train_cell(c, p, k, b.train, teacher);
    std::lock_guard lock(mu);
    log("train: " + p.cell_dir(k.prior, k.method, k.seed).filename().string() + " final elbo " +
        fmt(s.epochs.back().elbo) + " (" + fmt(s.seconds) + " s)");
  });
  t.push_back({"train", since(t0)});
}

void cmd_eval(const ExperimentConfig& c, unsigned jobs, bool with_ood, std::vector<PhaseTime>& t) {
  const RunPaths p{c.out};
  const DataBundle b = load_data(p);
  const DensityEstimate teacher = load_teacher(p);
  if (with_ood && !b.ood) throw StageError("no OOD dataset in '" + p.data_dir().string() + "' (synthetic runs only)");
  const auto cells = cell_grid(c);
  const auto t0 = std::chrono::steady_clock::now();
  for_each_cell(cells, jobs, [&](const CellKey& k) { eval_cell(c, p, k, b, teacher, with_ood); });
  t.push_back({with_ood ? "ood" : "eval", since(t0)});
  if (with_ood) {
    const std::string csv = gather_cell_csv(p, cells, "ood.csv", kOodHeader);
    io::write_text_atomic(p.ood_csv(), csv);
    std::cout << csv;
  } else {
    const std::string csv = gather_cell_csv(p, cells, "metrics.csv", kMetricsHeader);
    io::write_text_atomic(p.metrics_csv(), csv);
    std::cout << csv;
  }
}

void cmd_report(const ExperimentConfig& c) {
  const RunPaths p{c.out};
  require_stage(p.metrics_csv(), "eval");
  const std::string rep = aggregate_report(read_csv(p.metrics_csv()));
  io::write_text_atomic(p.report_csv(), rep);
  std::cout << pretty_report(rep);
}

void cmd_timing(const ExperimentConfig& c) {
  const RunPaths p{c.out};
  const std::string csv = timing_csv(timing_rows(c, p));
  io::write_text_atomic(p.timing_csv(), csv);
  std::cout << csv;
}

int run(int argc, char** argv) {
  CLI::App app{"Density-informed VAE experiments"};
  app.require_subcommand(1);
  CommonArgs a;
  struct Sub {
    const char* name;
    const char* help;
  };
  const Sub subs[] = {
      {"gen-data", "generate (or ingest) train/val/OOD datasets"},
      {"estimate", "fit PCA and the density teacher on the training set"},
      {"train", "train every (prior, method, seed) cell"},
      {"eval", "evaluate trained cells; writes metrics.csv and latents"},
      {"ood", "evaluate trained cells on the shifted dataset"},
      {"report", "aggregate metrics.csv into mean/std tables"},
      {"timing", "per-epoch wall-clock per (prior, method)"},
      {"run", "all stages in order"},
      {"show-config", "print the resolved config"},
  };
  std::vector<CLI::App*> cmds;
  for (const auto& s : subs) {
    auto* cmd = app.add_subcommand(s.name, s.help);
    add_common(cmd, a);
    cmds.push_back(cmd);
  }
  CLI11_PARSE(app, argc, argv);

  std::string which;
  for (auto* cmd : cmds)
    if (cmd->parsed()) which = cmd->get_name();

  try {
    const ExperimentConfig c = resolve(a);
    std::vector<PhaseTime> phases;
    if (which == "show-config") {
      std::cout << config_to_text(c);
      return kOk;
    }
    if (which == "gen-data" || which == "run") cmd_gen_data(c, phases);
    if (which == "estimate" || which == "run") cmd_estimate(c, phases);
    if (which == "train" || which == "run") cmd_train(c, a.jobs, phases);
    if (which == "eval" || which == "run") cmd_eval(c, a.jobs, false, phases);
    if (which == "ood" || (which == "run" && c.dataset == DatasetKind::synthetic)) cmd_eval(c, a.jobs, true, phases);
    if (which == "report" || which == "run") cmd_report(c);
    if (which == "timing" || which == "run") cmd_timing(c);
    write_manifest(c, RunPaths{c.out}, phases);
    return kOk;
  } catch (const ConfigError& e) {
    std::cerr << "config error: " << e.what() << "\n";
    return kConfig;
  } catch (const NumericError& e) {
    std::cerr << "numeric failure in op '" << e.op() << "': " << e.what() << "\n";
    return kNumeric;
  } catch (const StageError& e) {
    std::cerr << "error: " << e.what() << "\n";
    return kFailure;
  } catch (const std::exception& e) {
    std::cerr << "error: " << e.what() << "\n";
    return kFailure;
  }
}

}  // namespace

int main(int argc, char** argv) { return run(argc, argv); }
