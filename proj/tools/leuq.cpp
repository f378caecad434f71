// Batch driver for the latent-evolution surrogate pipeline:
//   leuq generate  synthesize Navier-Stokes vorticity datasets
//   leuq train     fit single models or deep ensembles
//   leuq eval      rollout evaluation with calibration reports
//   leuq invert    recover initial states by latent or input-space BPTT
// All randomness flows from --seed; reruns with identical flags are
// bit-identical. LEUQ_THREADS caps worker threads.

#include <cstdio>
#include <filesystem>
#include <fstream>
#include <iostream>
#include <string>
#include <vector>

#include <CLI11.hpp>
#include <json.hpp>

#include "leuq/dataset.hpp"
#include "leuq/inverse.hpp"
#include "leuq/model.hpp"
#include "leuq/solver.hpp"
#include "leuq/training.hpp"
#include "leuq/uq_eval.hpp"

namespace fs = std::filesystem;
using nlohmann::json;

namespace {

constexpr int kExitOk = 0;
constexpr int kExitConfig = 2;
constexpr int kExitSolver = 3;
constexpr int kExitDivergence = 4;
constexpr int kExitCheckpoint = 5;
constexpr int kExitInversion = 6;

json load_config_file(const std::string& path) {
  if (path.empty()) return json::object();
  std::ifstream is(path);
  if (!is) throw leuq::ConfigError("cannot open config file: " + path);
  try {
    return json::parse(is);
  } catch (const json::exception& e) {
    throw leuq::ConfigError("malformed config file " + path + ": " + e.what());
  }
}

// Config-file values apply only where the command line stayed silent.
template <typename T>
void fill_from_config(const CLI::App& app, const json& cfg, const std::string& flag,
                      const std::string& key, T& value) {
  const CLI::Option* opt = app.get_option_no_throw("--" + flag);
  if (opt != nullptr && opt->count() > 0) return;
  if (cfg.contains(key)) value = cfg[key].get<T>();
}

void write_resolved_config(const fs::path& dir, const json& resolved) {
  fs::create_directories(dir);
  std::ofstream os(dir / "config.json");
  if (!os) throw leuq::IoError("cannot write resolved config in " + dir.string());
  os << resolved.dump(2) << "\n";
}

leuq::ModelConfig parse_variant(leuq::ModelConfig base, const std::string& variant) {
  base.latent = true;
  base.with_sigma = true;
  base.propagate_zsigma = true;
  std::size_t pos = 0;
  while (pos <= variant.size()) {
    const std::size_t next = variant.find('+', pos);
    const std::string tok = variant.substr(pos, next == std::string::npos ? next : next - pos);
    if (tok == "latent") {
      base.latent = true;
    } else if (tok == "no_latent") {
      base.latent = false;
    } else if (tok == "sigma") {
      base.with_sigma = true;
    } else if (tok == "deterministic") {
      base.with_sigma = false;
    } else if (tok == "zsigma") {
      base.propagate_zsigma = true;
    } else if (tok == "no_zsigma") {
      base.propagate_zsigma = false;
    } else if (!tok.empty()) {
      throw leuq::ConfigError("unknown variant token '" + tok + "' in '" + variant + "'");
    }
    if (next == std::string::npos) break;
    pos = next + 1;
  }
  if (!base.with_sigma) base.propagate_zsigma = true;  // flag is meaningless without sigma
  return base;
}

std::vector<leuq::SurrogateModel> load_ensemble(const fs::path& run_dir) {
  std::vector<leuq::SurrogateModel> models;
  for (std::size_t k = 0;; ++k) {
    const fs::path ck = run_dir / ("member_" + std::to_string(k) + ".ckpt");
    if (!fs::exists(ck)) break;
    models.push_back(leuq::SurrogateModel::load(ck));
  }
  if (models.empty()) {
    throw leuq::IoError("no member checkpoints found under " + run_dir.string());
  }
  return models;
}

// ---- generate ------------------------------------------------------------

struct GenerateArgs {
  std::string config_file;
  std::string out;
  leuq::SolverConfig solver;
  std::size_t n_train = 50;
  std::size_t n_test = 10;
};

int cmd_generate(GenerateArgs& a, const CLI::App& app) {
  try {
    const json cfg = load_config_file(a.config_file);
    fill_from_config(app, cfg, "n", "grid", a.solver.grid);
    fill_from_config(app, cfg, "nu", "viscosity", a.solver.viscosity);
    fill_from_config(app, cfg, "forcing-amp", "forcing_amplitude", a.solver.forcing_amplitude);
    fill_from_config(app, cfg, "dt", "dt", a.solver.dt);
    fill_from_config(app, cfg, "snap-dt", "snap_dt", a.solver.snap_dt);
    fill_from_config(app, cfg, "snapshots", "snapshots", a.solver.snapshots);
    fill_from_config(app, cfg, "seed", "seed", a.solver.seed);
    fill_from_config(app, cfg, "ic-alpha", "ic_alpha", a.solver.ic_alpha);
    fill_from_config(app, cfg, "ic-tau", "ic_tau", a.solver.ic_tau);
    fill_from_config(app, cfg, "ic-amp", "ic_amplitude", a.solver.ic_amplitude);
    fill_from_config(app, cfg, "train", "n_train", a.n_train);
    fill_from_config(app, cfg, "test", "n_test", a.n_test);
    a.solver.validate();
    if (a.out.empty()) throw leuq::ConfigError("--out directory is required");
  } catch (const leuq::Error& e) {
    std::cerr << "config error: " << e.what() << "\n";
    return kExitConfig;
  }

  try {
    auto [train, test] = leuq::generate_dataset(a.solver, a.n_train, a.n_test);
    fs::create_directories(a.out);
    leuq::save_dataset(train, fs::path(a.out) / "train.leuq");
    leuq::save_dataset(test, fs::path(a.out) / "test.leuq");
    json resolved;
    resolved["command"] = "generate";
    resolved["config"] = a.solver;
    resolved["n_train"] = a.n_train;
    resolved["n_test"] = a.n_test;
    resolved["files"] = {"train.leuq", "test.leuq"};
    write_resolved_config(a.out, resolved);
    std::ofstream manifest(fs::path(a.out) / "manifest.json");
    manifest << resolved.dump(2) << "\n";
    std::cout << "wrote " << a.n_train << " train + " << a.n_test << " test trajectories to "
              << a.out << "\n";
    return kExitOk;
  } catch (const leuq::Error& e) {
    std::cerr << "solver error: " << e.what() << "\n";
    return kExitSolver;
  }
}

// ---- train ------------------------------------------------------------------

struct TrainArgs {
  std::string config_file;
  std::string data;
  std::string out;
  std::string variant = "latent+sigma+zsigma";
  std::string loss = "nll";
  leuq::TrainRunConfig run;
  std::size_t d_z = 0;  // 0 = grid default
  std::size_t d_zp = 16;
  std::size_t channels = 0;
  std::size_t conv_blocks = 0;
  std::size_t history = 10;
  std::size_t bundle = 1;
  std::size_t horizon = 4;
};

int cmd_train(TrainArgs& a, const CLI::App& app) {
  leuq::TrajectorySet train_set;
  leuq::ModelConfig mcfg;
  try {
    const json cfg = load_config_file(a.config_file);
    fill_from_config(app, cfg, "data", "data", a.data);
    fill_from_config(app, cfg, "variant", "variant", a.variant);
    fill_from_config(app, cfg, "loss", "loss", a.loss);
    fill_from_config(app, cfg, "ensemble", "ensemble", a.run.ensemble);
    fill_from_config(app, cfg, "epochs", "epochs", a.run.epochs);
    fill_from_config(app, cfg, "batch", "batch", a.run.batch);
    fill_from_config(app, cfg, "lr", "lr", a.run.lr);
    fill_from_config(app, cfg, "lr-end", "lr_end", a.run.lr_end);
    fill_from_config(app, cfg, "seed", "seed", a.run.seed);
    fill_from_config(app, cfg, "window-stride", "window_stride", a.run.window_stride);
    fill_from_config(app, cfg, "dz", "d_z", a.d_z);
    fill_from_config(app, cfg, "dzp", "d_zp", a.d_zp);
    fill_from_config(app, cfg, "channels", "channels", a.channels);
    fill_from_config(app, cfg, "conv-blocks", "conv_blocks", a.conv_blocks);
    fill_from_config(app, cfg, "history", "history", a.history);
    fill_from_config(app, cfg, "bundle", "bundle", a.bundle);
    fill_from_config(app, cfg, "horizon", "horizon", a.horizon);

    if (a.data.empty() || a.out.empty()) {
      throw leuq::ConfigError("--data and --out are required");
    }
    const fs::path train_path = fs::path(a.data) / "train.leuq";
    if (!fs::exists(train_path)) {
      throw leuq::ConfigError("dataset not found: " + train_path.string());
    }
    train_set = leuq::load_dataset(train_path);

    mcfg = leuq::ModelConfig::defaults_for_grid(train_set.grid);
    mcfg = parse_variant(mcfg, a.variant);
    mcfg.loss = a.loss;
    a.run.loss = a.loss;
    if (a.d_z > 0) mcfg.d_z = a.d_z;
    mcfg.d_zp = a.d_zp;
    if (a.channels > 0) mcfg.channels = a.channels;
    if (a.conv_blocks > 0) mcfg.conv_blocks = a.conv_blocks;
    mcfg.history = a.history;
    mcfg.bundle = a.bundle;
    mcfg.horizon = a.horizon;
    mcfg.validate();
    a.run.validate();
  } catch (const leuq::Error& e) {
    std::cerr << "config error: " << e.what() << "\n";
    return kExitConfig;
  }

  try {
    const auto windows =
        leuq::make_bundled_windows(train_set, mcfg.history, mcfg.horizon, mcfg.bundle);
    const auto members = leuq::train_ensemble(windows, a.run, mcfg);

    fs::create_directories(a.out);
    for (std::size_t k = 0; k < members.size(); ++k) {
      members[k].model.save(fs::path(a.out) / ("member_" + std::to_string(k) + ".ckpt"));
    }
    leuq::write_metrics_csv(fs::path(a.out) / "metrics.csv", members);
    json resolved;
    resolved["command"] = "train";
    resolved["data"] = a.data;
    resolved["model_config"] = mcfg;
    resolved["ensemble"] = a.run.ensemble;
    resolved["epochs"] = a.run.epochs;
    resolved["batch"] = a.run.batch;
    resolved["lr"] = a.run.lr;
    resolved["lr_end"] = a.run.lr_end;
    resolved["seed"] = a.run.seed;
    resolved["window_stride"] = a.run.window_stride;
    resolved["loss"] = a.run.loss;
    write_resolved_config(a.out, resolved);
    std::cout << "trained " << members.size() << " member(s), final loss "
              << members.back().history.back().total << "\n";
    return kExitOk;
  } catch (const leuq::DivergenceError& e) {
    std::cerr << "divergence: " << e.what() << "\n";
    return kExitDivergence;
  } catch (const leuq::Error& e) {
    std::cerr << "error: " << e.what() << "\n";
    return kExitConfig;
  }
}

// ---- eval --------------------------------------------------------------------

struct EvalArgs {
  std::string config_file;
  std::string run;
  std::string data;
  std::string out;
  std::string mode = "autoregressive";
  std::size_t horizon = 10;
  std::size_t bins = 100;
};

int cmd_eval(EvalArgs& a, const CLI::App& app) {
  leuq::TrajectorySet test_set;
  leuq::RolloutMode mode;
  try {
    const json cfg = load_config_file(a.config_file);
    fill_from_config(app, cfg, "run", "run", a.run);
    fill_from_config(app, cfg, "data", "data", a.data);
    fill_from_config(app, cfg, "mode", "mode", a.mode);
    fill_from_config(app, cfg, "horizon", "horizon", a.horizon);
    fill_from_config(app, cfg, "bins", "bins", a.bins);
    if (a.run.empty() || a.data.empty()) {
      throw leuq::ConfigError("--run and --data are required");
    }
    if (a.mode == "autoregressive") {
      mode = leuq::RolloutMode::autoregressive;
    } else if (a.mode == "teacher_forcing") {
      mode = leuq::RolloutMode::teacher_forcing;
    } else {
      throw leuq::ConfigError("unknown mode '" + a.mode + "'");
    }
    const fs::path test_path = fs::path(a.data) / "test.leuq";
    if (!fs::exists(test_path)) throw leuq::ConfigError("dataset not found: " + test_path.string());
    test_set = leuq::load_dataset(test_path);
  } catch (const leuq::Error& e) {
    std::cerr << "config error: " << e.what() << "\n";
    return kExitConfig;
  }

  std::vector<leuq::SurrogateModel> models;
  try {
    models = load_ensemble(a.run);
  } catch (const leuq::Error& e) {
    std::cerr << "checkpoint error: " << e.what() << "\n";
    return kExitCheckpoint;
  }

  try {
    const auto report = leuq::evaluate_rollout(models, test_set, mode, a.horizon, a.bins);
    const fs::path out_dir = a.out.empty() ? fs::path(a.run) / ("eval_" + a.mode) : fs::path(a.out);
    leuq::write_report_files(report, out_dir);
    json resolved;
    resolved["command"] = "eval";
    resolved["run"] = a.run;
    resolved["data"] = a.data;
    resolved["mode"] = a.mode;
    resolved["horizon"] = a.horizon;
    resolved["bins"] = a.bins;
    resolved["members"] = models.size();
    write_resolved_config(out_dir, resolved);
    std::cout << "MA=" << report.ma << " MACE=" << report.mace << " RMSCE=" << report.rmsce
              << " L2=" << report.l2 << " MAE=" << report.mae << "\n";
    return kExitOk;
  } catch (const leuq::Error& e) {
    std::cerr << "error: " << e.what() << "\n";
    return kExitConfig;
  }
}

// ---- invert ---------------------------------------------------------------

struct InvertArgs {
  std::string config_file;
  std::string run;
  std::string data;
  std::string out;
  std::string route = "latent";
  std::string split = "test";
  std::size_t traj = 0;
  std::size_t k_s = 1;
  std::size_t k_e = 10;
  std::size_t iters = 500;
  double lr = 1e-2;
};

int cmd_invert(InvertArgs& a, const CLI::App& app) {
  leuq::TrajectorySet data_set;
  leuq::InverseRoute route;
  try {
    const json cfg = load_config_file(a.config_file);
    fill_from_config(app, cfg, "run", "run", a.run);
    fill_from_config(app, cfg, "data", "data", a.data);
    fill_from_config(app, cfg, "route", "route", a.route);
    fill_from_config(app, cfg, "split", "split", a.split);
    fill_from_config(app, cfg, "traj", "traj", a.traj);
    fill_from_config(app, cfg, "ks", "k_s", a.k_s);
    fill_from_config(app, cfg, "ke", "k_e", a.k_e);
    fill_from_config(app, cfg, "iters", "iterations", a.iters);
    fill_from_config(app, cfg, "lr", "lr", a.lr);
    if (a.run.empty() || a.data.empty() || a.out.empty()) {
      throw leuq::ConfigError("--run, --data and --out are required");
    }
    if (a.route == "latent") {
      route = leuq::InverseRoute::latent;
    } else if (a.route == "input") {
      route = leuq::InverseRoute::input_space;
    } else {
      throw leuq::ConfigError("unknown route '" + a.route + "'");
    }
    const fs::path p = fs::path(a.data) / (a.split + ".leuq");
    if (!fs::exists(p)) throw leuq::ConfigError("dataset not found: " + p.string());
    data_set = leuq::load_dataset(p);
  } catch (const leuq::Error& e) {
    std::cerr << "config error: " << e.what() << "\n";
    return kExitConfig;
  }

  std::vector<leuq::SurrogateModel> models;
  try {
    models = load_ensemble(a.run);
  } catch (const leuq::Error& e) {
    std::cerr << "checkpoint error: " << e.what() << "\n";
    return kExitCheckpoint;
  }

  try {
    leuq::InverseProblem prob =
        leuq::make_inverse_problem(data_set, a.traj, models[0].cfg, a.k_s, a.k_e);
    prob.iterations = a.iters;
    prob.lr = a.lr;
    const auto sol = leuq::inverse_uq(models, prob, route);

    fs::create_directories(a.out);
    {
      json pj;
      pj["route"] = a.route;
      pj["split"] = a.split;
      pj["traj"] = a.traj;
      pj["k_s"] = a.k_s;
      pj["k_e"] = a.k_e;
      pj["iterations"] = a.iters;
      pj["lr"] = a.lr;
      pj["members"] = models.size();
      std::ofstream os(fs::path(a.out) / "problem.json");
      os << pj.dump(2) << "\n";
    }
    const auto& cfg0 = models[0].cfg;
    for (std::size_t k = 0; k < sol.members.size(); ++k) {
      leuq::TrajectorySet field;
      field.config = data_set.config;
      field.split = "recovered";
      field.n_traj = 1;
      field.t_snap = cfg0.bundle;
      field.grid = cfg0.grid;
      field.states = sol.members[k].recovered;
      leuq::save_dataset(field, fs::path(a.out) / ("member_" + std::to_string(k) +
                                                   "_recovered.leuq"));
    }
    if (sol.has_report) {
      leuq::write_report_files(sol.report, a.out, "report");
      std::cout << "recovered-field: MA=" << sol.report.ma << " L2=" << sol.report.l2 << "\n";
    }
    json resolved;
    resolved["command"] = "invert";
    resolved["run"] = a.run;
    resolved["data"] = a.data;
    resolved["route"] = a.route;
    resolved["traj"] = a.traj;
    resolved["k_s"] = a.k_s;
    resolved["k_e"] = a.k_e;
    resolved["iterations"] = a.iters;
    resolved["lr"] = a.lr;
    write_resolved_config(a.out, resolved);
    std::cout << "objective " << sol.members[0].initial_objective << " -> "
              << sol.members[0].best_objective << " (member 0)\n";
    return kExitOk;
  } catch (const leuq::ConfigError& e) {
    std::cerr << "config error: " << e.what() << "\n";
    return kExitConfig;
  } catch (const leuq::Error& e) {
    std::cerr << "inversion error: " << e.what() << "\n";
    return kExitInversion;
  }
}

}  // namespace

int main(int argc, char** argv) {
  CLI::App app{"latent-evolution PDE surrogate with uncertainty quantification"};
  app.require_subcommand(1);

  GenerateArgs ga;
  CLI::App* gen = app.add_subcommand("generate", "simulate vorticity trajectories");
  gen->add_option("--config", ga.config_file, "JSON config file (flags override)");
  gen->add_option("--out", ga.out, "output directory");
  gen->add_option("--n", ga.solver.grid, "grid resolution per side");
  gen->add_option("--train", ga.n_train, "training trajectories");
  gen->add_option("--test", ga.n_test, "test trajectories");
  gen->add_option("--seed", ga.solver.seed, "master seed");
  gen->add_option("--nu", ga.solver.viscosity, "viscosity");
  gen->add_option("--dt", ga.solver.dt, "solver time step");
  gen->add_option("--snap-dt", ga.solver.snap_dt, "time between snapshots");
  gen->add_option("--snapshots", ga.solver.snapshots, "snapshots per trajectory");
  gen->add_option("--forcing-amp", ga.solver.forcing_amplitude, "forcing amplitude");
  gen->add_option("--ic-alpha", ga.solver.ic_alpha, "initial-field spectral exponent");
  gen->add_option("--ic-tau", ga.solver.ic_tau, "initial-field spectral scale");
  gen->add_option("--ic-amp", ga.solver.ic_amplitude, "initial-field amplitude");

  TrainArgs ta;
  CLI::App* tr = app.add_subcommand("train", "train surrogate model(s)");
  tr->add_option("--config", ta.config_file, "JSON config file (flags override)");
  tr->add_option("--data", ta.data, "dataset directory (train.leuq)");
  tr->add_option("--out", ta.out, "run directory");
  tr->add_option("--variant", ta.variant,
                 "{latent|no_latent}+{sigma|deterministic}[+{zsigma|no_zsigma}]");
  tr->add_option("--loss", ta.loss, "nll | mse | l1");
  tr->add_option("--ensemble", ta.run.ensemble, "ensemble size K");
  tr->add_option("--epochs", ta.run.epochs, "training epochs");
  tr->add_option("--batch", ta.run.batch, "batch size");
  tr->add_option("--lr", ta.run.lr, "initial learning rate");
  tr->add_option("--lr-end", ta.run.lr_end, "final learning rate (cosine)");
  tr->add_option("--seed", ta.run.seed, "master seed");
  tr->add_option("--window-stride", ta.run.window_stride, "train on every k-th window");
  tr->add_option("--dz", ta.d_z, "latent width");
  tr->add_option("--dzp", ta.d_zp, "static latent width");
  tr->add_option("--channels", ta.channels, "base conv channels");
  tr->add_option("--conv-blocks", ta.conv_blocks, "encoder downsampling blocks");
  tr->add_option("--history", ta.history, "input frames");
  tr->add_option("--bundle", ta.bundle, "temporal bundling width S");
  tr->add_option("--horizon", ta.horizon, "training rollout length M");

  EvalArgs ea;
  CLI::App* ev = app.add_subcommand("eval", "evaluate rollout calibration");
  ev->add_option("--config", ea.config_file, "JSON config file (flags override)");
  ev->add_option("--run", ea.run, "run directory with member checkpoints");
  ev->add_option("--data", ea.data, "dataset directory (test.leuq)");
  ev->add_option("--out", ea.out, "report directory (default <run>/eval_<mode>)");
  ev->add_option("--mode", ea.mode, "autoregressive | teacher_forcing");
  ev->add_option("--horizon", ea.horizon, "rollout steps");
  ev->add_option("--bins", ea.bins, "calibration grid size");

  InvertArgs ia;
  CLI::App* in = app.add_subcommand("invert", "recover the initial state");
  in->add_option("--config", ia.config_file, "JSON config file (flags override)");
  in->add_option("--run", ia.run, "run directory with member checkpoints");
  in->add_option("--ensemble-dir", ia.run, "alias of --run");
  in->add_option("--data", ia.data, "dataset directory");
  in->add_option("--out", ia.out, "output directory");
  in->add_option("--route", ia.route, "latent | input");
  in->add_option("--split", ia.split, "train | test");
  in->add_option("--traj", ia.traj, "trajectory index");
  in->add_option("--ks", ia.k_s, "first observed step");
  in->add_option("--ke", ia.k_e, "last observed step");
  in->add_option("--iters", ia.iters, "optimization iterations");
  in->add_option("--lr", ia.lr, "optimization learning rate");

  CLI11_PARSE(app, argc, argv);

  if (gen->parsed()) return cmd_generate(ga, *gen);
  if (tr->parsed()) return cmd_train(ta, *tr);
  if (ev->parsed()) return cmd_eval(ea, *ev);
  if (in->parsed()) return cmd_invert(ia, *in);
  return kExitConfig;
}
