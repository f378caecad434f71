#pragma once

#include <cmath>
#include <cstdint>
#include <limits>
#include <optional>
#include <string>
#include <vector>

#include <json.hpp>

#include "leuq/adam.hpp"
#include "leuq/common.hpp"
#include "leuq/dataset.hpp"
#include "leuq/model.hpp"
#include "leuq/parallel.hpp"
#include "leuq/uq_eval.hpp"

namespace leuq {

enum class InverseRoute { latent, input_space };

enum class InverseTarget { initial_state, static_param, both };

// Recover the initial state (optionally a static parameter) from observed
// future states U^m, m in [k_s, k_e], by BPTT through a frozen surrogate.
struct InverseProblem {
  std::size_t k_s = 1;
  std::size_t k_e = 10;
  std::vector<double> observations;  // [(k_e-k_s+1), S, N, N] flattened
  std::size_t grid = 0;
  std::size_t bundle = 1;
  InverseTarget target = InverseTarget::initial_state;
  std::size_t iterations = 500;
  double lr = 1e-2;
  // Optional override of the default first-observation-tiled initial guess
  // (latent route: widths d_z; input route ignores these).
  std::vector<double> init_z;
  std::vector<double> init_z_sigma;
  // Optional ground-truth initial bundle [S, N, N] for reporting.
  std::vector<double> truth_initial;

  std::size_t n_obs() const { return k_e - k_s + 1; }
  std::size_t frame_elems() const { return bundle * grid * grid; }

  void validate() const {
    if (k_s < 1 || k_e < k_s) throw ConfigError("inverse problem requires 1 <= k_s <= k_e");
    if (iterations < 1) throw ConfigError("iteration budget must be >= 1");
    if (grid == 0 || bundle == 0) throw ConfigError("inverse problem geometry unset");
    if (observations.size() != n_obs() * frame_elems()) {
      throw ConfigError("observations hold " + std::to_string(observations.size()) +
                        " values, expected " + std::to_string(n_obs() * frame_elems()));
    }
    if (!truth_initial.empty() && truth_initial.size() != frame_elems()) {
      throw ConfigError("ground-truth initial bundle has the wrong size");
    }
  }
};

struct InverseMemberResult {
  std::vector<double> z0;              // optimized latent (latent route)
  std::vector<double> z0_sigma;
  std::vector<double> z_p;             // optimized static embedding, if requested
  std::vector<double> recovered;       // initial bundle estimate [S, N, N]
  std::vector<double> recovered_sigma; // decoded sigma for the latent route
  std::vector<double> objective_trace; // one entry per evaluated iterate
  double initial_objective = 0.0;
  double best_objective = 0.0;
  std::size_t optimized_dims = 0;      // total entries Adam acted on
};

namespace detail {

inline Tensor tile_first_observation(const InverseProblem& prob, std::size_t history) {
  const std::size_t nn = prob.grid * prob.grid;
  std::vector<double> data(history * nn);
  for (std::size_t i = 0; i < history; ++i) {
    std::copy_n(prob.observations.data(), nn, data.data() + i * nn);
  }
  return Tensor::from_data({1, history, prob.grid, prob.grid}, std::move(data));
}

inline Tensor observation_tensor(const InverseProblem& prob, std::size_t m) {
  const std::size_t fe = prob.frame_elems();
  std::vector<double> data(prob.observations.begin() + (m - prob.k_s) * fe,
                           prob.observations.begin() + (m - prob.k_s + 1) * fe);
  return Tensor::from_data({1, prob.bundle, prob.grid, prob.grid}, std::move(data));
}

// Flags off parameter gradients for the scope of an inversion.
class FreezeParams {
 public:
  explicit FreezeParams(const SurrogateModel& m) : params_(m.parameters()) {
    for (Tensor& p : params_) {
      nodes_.push_back(p.node().get());
      nodes_.back()->requires_grad = false;
    }
  }
  ~FreezeParams() {
    for (auto* n : nodes_) n->requires_grad = true;
  }

 private:
  std::vector<Tensor> params_;
  std::vector<Node*> nodes_;
};

}  // namespace detail

// Latent-route inversion: optimize (z0, z0_sigma) under
//   sum_{m=k_s}^{k_e} || h_mu(g^(m)(z0, z_p)) - U^m ||^2,
// then decode the best iterate. The surrogate stays frozen throughout.
inline InverseMemberResult invert_initial_state(const SurrogateModel& m,
                                                const InverseProblem& prob) {
  prob.validate();
  const ModelConfig& cfg = m.cfg;
  if (!cfg.latent) throw ContractError("latent-route inversion needs a latent model");
  if (prob.grid != cfg.grid || prob.bundle != cfg.bundle) {
    throw ConfigError("inverse problem geometry does not match the model");
  }
  const bool optimize_state =
      prob.target == InverseTarget::initial_state || prob.target == InverseTarget::both;
  const bool optimize_static =
      prob.target == InverseTarget::static_param || prob.target == InverseTarget::both;
  if (optimize_static && cfg.static_dim == 0) {
    throw ConfigError("static-parameter inversion requires a model with a static encoder");
  }

  detail::FreezeParams freeze(m);

  // initial guess: encode the earliest observed frame tiled across history
  Tensor z0, z0s;
  {
    NoGradGuard ng;
    LatentState s = m.encode(detail::tile_first_observation(prob, cfg.history));
    std::vector<double> z(prob.init_z.empty()
                              ? std::vector<double>(s.z.data().begin(), s.z.data().end())
                              : prob.init_z);
    z0 = Tensor::from_data({1, cfg.d_z}, std::move(z), optimize_state);
    if (cfg.with_sigma) {
      std::vector<double> zs(prob.init_z_sigma.empty()
                                 ? std::vector<double>(s.z_sigma.data().begin(),
                                                       s.z_sigma.data().end())
                                 : prob.init_z_sigma);
      z0s = Tensor::from_data({1, cfg.d_z}, std::move(zs), optimize_state);
    }
  }
  Tensor zp;
  if (optimize_static) zp = Tensor::zeros({1, cfg.d_zp}, true);

  std::vector<Tensor> vars;
  if (optimize_state) {
    vars.push_back(z0);
    if (z0s.defined()) vars.push_back(z0s);
  }
  if (optimize_static) vars.push_back(zp);
  if (vars.empty()) throw ConfigError("inverse problem optimizes nothing");

  std::vector<Tensor> observations;
  for (std::size_t k = prob.k_s; k <= prob.k_e; ++k) {
    observations.push_back(detail::observation_tensor(prob, k));
  }

  auto objective = [&]() -> Tensor {
    LatentState s{z0, z0s};
    Tensor total;
    for (std::size_t step = 1; step <= prob.k_e; ++step) {
      s = m.evolve(s, zp);
      if (step >= prob.k_s) {
        Tensor diff = sub(m.decode_state(s), observations[step - prob.k_s]);
        Tensor term = sum_all(square(diff));
        total = total.defined() ? add(total, term) : term;
      }
    }
    return total;
  };

  InverseMemberResult result;
  for (const Tensor& v : vars) result.optimized_dims += v.numel();
  AdamState opt(AdamConfig{prob.lr, 0.9, 0.999, 1e-8});
  double best = std::numeric_limits<double>::infinity();
  auto consider = [&](double value) {
    if (value < best) {
      best = value;
      result.z0.assign(z0.data().begin(), z0.data().end());
      if (z0s.defined()) result.z0_sigma.assign(z0s.data().begin(), z0s.data().end());
      if (zp.defined()) result.z_p.assign(zp.data().begin(), zp.data().end());
    }
  };

  GradModeGuard grads_on(true);
  for (std::size_t it = 0; it < prob.iterations; ++it) {
    zero_grads(vars);
    Tensor obj;
    try {
      obj = objective();
    } catch (const NumericError& e) {
      throw NumericError("inversion objective became non-finite at iteration " +
                         std::to_string(it) + ": " + e.what());
    }
    const double value = obj.item();
    result.objective_trace.push_back(value);
    if (it == 0) result.initial_objective = value;
    consider(value);
    obj.backward();
    adam_step(vars, opt);
  }
  {
    NoGradGuard ng;
    const double final_value = objective().item();
    result.objective_trace.push_back(final_value);
    consider(final_value);
  }
  result.best_objective = best;

  // decode the best iterate
  {
    NoGradGuard ng;
    LatentState sb;
    sb.z = Tensor::from_data({1, cfg.d_z}, result.z0);
    if (!result.z0_sigma.empty()) sb.z_sigma = Tensor::from_data({1, cfg.d_z}, result.z0_sigma);
    Tensor u = m.decode_state(sb);
    result.recovered.assign(u.data().begin(), u.data().end());
    if (cfg.with_sigma) {
      Tensor su = m.decode_uncertainty(sb);
      result.recovered_sigma.assign(su.data().begin(), su.data().end());
    }
  }
  return result;
}

// Input-space route: the same objective, but Adam acts directly on the pixel
// window (through the encoder for latent models, through the input-space
// stepper otherwise). High-dimensional and prone to non-physical solutions;
// kept as the comparison baseline.
inline InverseMemberResult invert_input_space(const SurrogateModel& m,
                                              const InverseProblem& prob) {
  prob.validate();
  const ModelConfig& cfg = m.cfg;
  if (prob.grid != cfg.grid || prob.bundle != cfg.bundle) {
    throw ConfigError("inverse problem geometry does not match the model");
  }
  detail::FreezeParams freeze(m);

  Tensor window;
  {
    NoGradGuard ng;
    window = detail::tile_first_observation(prob, cfg.history);
  }
  Tensor var = Tensor::from_data(window.shape(),
                                 std::vector<double>(window.data().begin(), window.data().end()),
                                 true);

  std::vector<Tensor> observations;
  for (std::size_t k = prob.k_s; k <= prob.k_e; ++k) {
    observations.push_back(detail::observation_tensor(prob, k));
  }

  auto objective = [&]() -> Tensor {
    Tensor total;
    if (cfg.latent) {
      LatentState s = m.encode(var);
      for (std::size_t step = 1; step <= prob.k_e; ++step) {
        s = m.evolve(s, Tensor());
        if (step >= prob.k_s) {
          Tensor diff = sub(m.decode_state(s), observations[step - prob.k_s]);
          Tensor term = sum_all(square(diff));
          total = total.defined() ? add(total, term) : term;
        }
      }
    } else {
      Tensor w = var;
      for (std::size_t step = 1; step <= prob.k_e; ++step) {
        auto [pred, sigma] = m.step_input_space(w);
        if (step >= prob.k_s) {
          Tensor term = sum_all(square(sub(pred, observations[step - prob.k_s])));
          total = total.defined() ? add(total, term) : term;
        }
        if (step < prob.k_e) {
          w = concat_channels({slice_channels(w, cfg.bundle, cfg.history), pred});
        }
      }
    }
    return total;
  };

  InverseMemberResult result;
  std::vector<Tensor> vars{var};
  result.optimized_dims = var.numel();
  AdamState opt(AdamConfig{prob.lr, 0.9, 0.999, 1e-8});
  double best = std::numeric_limits<double>::infinity();
  std::vector<double> best_window;
  auto consider = [&](double value) {
    if (value < best) {
      best = value;
      best_window.assign(var.data().begin(), var.data().end());
    }
  };

  GradModeGuard grads_on(true);
  for (std::size_t it = 0; it < prob.iterations; ++it) {
    zero_grads(vars);
    Tensor obj;
    try {
      obj = objective();
    } catch (const NumericError& e) {
      throw NumericError("inversion objective became non-finite at iteration " +
                         std::to_string(it) + ": " + e.what());
    }
    const double value = obj.item();
    result.objective_trace.push_back(value);
    if (it == 0) result.initial_objective = value;
    consider(value);
    obj.backward();
    adam_step(vars, opt);
  }
  {
    NoGradGuard ng;
    const double final_value = objective().item();
    result.objective_trace.push_back(final_value);
    consider(final_value);
  }
  result.best_objective = best;

  // the recovered state is the optimized window's final bundle, verbatim
  const std::size_t nn = cfg.grid * cfg.grid;
  result.recovered.assign(best_window.begin() + (cfg.history - cfg.bundle) * nn,
                          best_window.end());
  return result;
}

// Ensemble inversion: each member solves the problem independently; the
// recovered fields are pooled like forward predictions. A calibration report
// against the supplied ground truth is attached when available.
struct InverseSolution {
  std::vector<InverseMemberResult> members;
  std::vector<std::string> member_errors;  // empty strings for successes
  AggregatedPrediction aggregate;
  CalibrationReport report;
  bool has_report = false;
};

inline InverseSolution inverse_uq(const std::vector<SurrogateModel>& models,
                                  const InverseProblem& prob, InverseRoute route) {
  if (models.empty()) throw ConfigError("inverse_uq: no ensemble members");
  InverseSolution sol;
  sol.members.resize(models.size());
  sol.member_errors.assign(models.size(), "");
  std::vector<char> ok(models.size(), 0);

  parallel_for(models.size(), [&](std::size_t k) {
    try {
      sol.members[k] = (route == InverseRoute::latent) ? invert_initial_state(models[k], prob)
                                                       : invert_input_space(models[k], prob);
      ok[k] = 1;
    } catch (const Error& e) {
      sol.member_errors[k] = std::string("member ") + std::to_string(k) + ": " + e.what();
    }
  });

  std::vector<MemberPrediction> preds;
  std::vector<InverseMemberResult> kept;
  for (std::size_t k = 0; k < models.size(); ++k) {
    if (!ok[k]) continue;
    MemberPrediction p;
    p.mu = sol.members[k].recovered;
    p.sigma = sol.members[k].recovered_sigma;  // empty = deterministic member
    preds.push_back(std::move(p));
    kept.push_back(sol.members[k]);
  }
  if (preds.empty()) {
    std::string msg = "inverse_uq: every ensemble member failed";
    for (const auto& e : sol.member_errors) {
      if (!e.empty()) msg += "; " + e;
    }
    throw NumericError(msg);
  }
  sol.members = std::move(kept);
  sol.aggregate = ensemble_aggregate(preds, models[0].cfg.sigma_min);

  if (!prob.truth_initial.empty()) {
    PredictiveSet ps;
    ps.mu = sol.aggregate.mu;
    ps.sigma = sol.aggregate.sigma;
    ps.y = prob.truth_initial;
    ps.tag = route == InverseRoute::latent ? "inverse/latent" : "inverse/input";
    sol.report = report_from_predictions(ps, {});
    sol.has_report = true;
  }
  return sol;
}

// Builds the standard inverse problem from a stored trajectory: the initial
// window is the first `history` frames, observations follow it.
inline InverseProblem make_inverse_problem(const TrajectorySet& ts, std::size_t traj,
                                           const ModelConfig& cfg, std::size_t k_s,
                                           std::size_t k_e) {
  if (traj >= ts.n_traj) throw ConfigError("trajectory index out of range");
  if (cfg.history + k_e * cfg.bundle > ts.t_snap) {
    throw ConfigError("observation window k_e exceeds the stored trajectory length");
  }
  InverseProblem prob;
  prob.k_s = k_s;
  prob.k_e = k_e;
  prob.grid = ts.grid;
  prob.bundle = cfg.bundle;
  const std::size_t nn = ts.grid * ts.grid;
  prob.observations.resize((k_e - k_s + 1) * cfg.bundle * nn);
  std::size_t w = 0;
  for (std::size_t m = k_s; m <= k_e; ++m) {
    for (std::size_t i = 0; i < cfg.bundle; ++i) {
      auto f = ts.frame(traj, cfg.history + (m - 1) * cfg.bundle + i);
      std::copy(f.begin(), f.end(), prob.observations.begin() + w);
      w += nn;
    }
  }
  prob.truth_initial.resize(cfg.bundle * nn);
  for (std::size_t i = 0; i < cfg.bundle; ++i) {
    auto f = ts.frame(traj, cfg.history - cfg.bundle + i);
    std::copy(f.begin(), f.end(), prob.truth_initial.begin() + i * nn);
  }
  return prob;
}

}  // namespace leuq
