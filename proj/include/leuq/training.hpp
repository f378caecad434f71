#pragma once

#include <cmath>
#include <cstdint>
#include <filesystem>
#include <fstream>
#include <span>
#include <string>
#include <vector>

#include "leuq/adam.hpp"
#include "leuq/common.hpp"
#include "leuq/dataset.hpp"
#include "leuq/model.hpp"
#include "leuq/parallel.hpp"
#include "leuq/rng.hpp"
#include "leuq/tensor.hpp"

namespace leuq {

struct DivergenceError : NumericError {
  using NumericError::NumericError;
};

// Per-step weights and term toggles for the training objective.
struct LossWeights {
  std::vector<double> alpha;  // alpha[m-1] weights rollout step m
  bool multi_step = true;
  bool reconstruction = true;
  bool consistency = true;
  double consistency_eps = 1e-12;  // denominator floor

  // (1, 0.1, 0.1, ..., 0.1)
  static LossWeights defaults(std::size_t horizon) {
    LossWeights w;
    w.alpha.assign(horizon, 0.1);
    if (!w.alpha.empty()) w.alpha[0] = 1.0;
    return w;
  }

  void validate() const {
    if (alpha.empty() || alpha[0] <= 0.0) throw ConfigError("loss weights require alpha_1 > 0");
    for (double a : alpha) {
      if (a < 0.0) throw ConfigError("loss weights must be non-negative");
    }
  }
};

struct TrainRunConfig {
  std::size_t epochs = 50;
  std::size_t batch = 16;
  double lr = 1e-3;
  double lr_end = 1e-4;  // cosine decay target
  AdamConfig adam;       // beta/eps hyperparameters; lr is driven by the schedule
  std::uint64_t seed = 0;
  std::size_t ensemble = 1;  // K
  std::string loss = "nll";
  std::size_t window_stride = 1;  // train on every k-th window
  double divergence_threshold = 1e6;

  void validate() const {
    if (ensemble < 1) throw ConfigError("ensemble size K must be >= 1");
    if (epochs < 1) throw ConfigError("epochs must be >= 1");
    if (batch < 1) throw ConfigError("batch size must be >= 1");
    if (window_stride < 1) throw ConfigError("window stride must be >= 1");
  }
};

// ---- pointwise losses -----------------------------------------------------

inline Tensor mse_loss(const Tensor& pred, const Tensor& target) {
  return mean_all(square(sub(pred, target)));
}

inline Tensor l1_loss(const Tensor& pred, const Tensor& target) {
  return mean_all(abs(sub(pred, target)));
}

// Per-element Gaussian negative log-likelihood, averaged:
//   0.5*log(2*pi*sigma^2) + (target - mean)^2 / (2*sigma^2).
inline Tensor gaussian_nll(const Tensor& mean, const Tensor& sigma, const Tensor& target) {
  Tensor var = square(sigma);
  Tensor log_term = mul_scalar(log(mul_scalar(var, 2.0 * 3.14159265358979323846)), 0.5);
  Tensor quad = div(square(sub(target, mean)), mul_scalar(var, 2.0));
  return mean_all(add(log_term, quad));
}

// ||z_pred - z_target||^2 / ||z_target||^2 per sample, averaged over the
// batch. The target side carries no gradient; it must be detached upstream.
inline Tensor consistency_ratio(const Tensor& z_pred, const Tensor& z_target, double eps = 1e-12) {
  Tensor diff_sq = row_sum(square(sub(z_pred, z_target)));  // [B]
  const std::size_t B = z_target.dim(0), F = z_target.dim(1);
  std::vector<double> inv(B);
  for (std::size_t b = 0; b < B; ++b) {
    double s = 0.0;
    for (std::size_t f = 0; f < F; ++f) {
      const double v = z_target.at(b * F + f);
      s += v * v;
    }
    inv[b] = 1.0 / (s + eps);
  }
  Tensor scale = Tensor::from_data({B}, std::move(inv));
  return mean_all(mul(diff_sq, scale));
}

// ---- the objective ---------------------------------------------------------

struct LossBreakdown {
  double total = 0.0;
  double multi = 0.0;
  double recons = 0.0;
  double consistency = 0.0;
  std::vector<double> step_losses;  // unweighted per-step values
};

// L = L_multi + L_recons + L_consistency over one batch of windows.
//   L_multi       sum_m alpha_m * l(pred_m, target_m); l is the per-element
//                 Gaussian NLL under the nll flavor, MSE/L1 otherwise (the
//                 sigma head receives no gradient under those flavors).
//   L_recons      point loss of decode(encode(U)) against the input bundle.
//   L_consistency latent rollout vs. encoded future windows, ratio-normalized
//                 on the z component, target branch held constant.
// The no_latent variant trains on the multi-step term alone, unrolled through
// input space.
inline std::pair<Tensor, LossBreakdown> compute_loss(const SurrogateModel& m,
                                                     std::span<const BundledWindow> batch,
                                                     const LossWeights& weights) {
  if (batch.empty()) throw ConfigError("compute_loss: empty batch");
  weights.validate();
  const ModelConfig& cfg = m.cfg;
  const std::size_t M = batch[0].horizon;
  if (M > weights.alpha.size()) {
    throw ConfigError("window horizon " + std::to_string(M) + " exceeds configured weights (" +
                      std::to_string(weights.alpha.size()) + ")");
  }
  const bool use_nll = cfg.loss == "nll";
  const bool use_l1 = cfg.loss == "l1";
  auto point_loss = [&](const Tensor& p, const Tensor& t) {
    return use_l1 ? l1_loss(p, t) : mse_loss(p, t);
  };

  LossBreakdown bd;
  Tensor input = detail::gather_inputs(batch);
  std::vector<Tensor> terms;

  // numeric failures carry the term they arose in
  auto attributed = [](const char* term, auto&& fn) {
    try {
      return fn();
    } catch (const NumericError& e) {
      throw NumericError(std::string(term) + " term: " + e.what());
    }
  };

  if (!cfg.latent) {
    Tensor window = input;
    Tensor multi;
    for (std::size_t step = 1; step <= M; ++step) {
      Tensor l = attributed("multi-step", [&]() {
        auto [pred, sigma] = m.step_input_space(window);
        Tensor target = detail::gather_step_targets(batch, step);
        Tensor step_loss = use_nll ? gaussian_nll(pred, sigma, target) : point_loss(pred, target);
        if (step < M) {
          window = concat_channels({slice_channels(window, cfg.bundle, cfg.history), pred});
        }
        return step_loss;
      });
      bd.step_losses.push_back(l.item());
      Tensor weighted = mul_scalar(l, weights.alpha[step - 1]);
      multi = multi.defined() ? add(multi, weighted) : weighted;
    }
    bd.multi = multi.item();
    bd.total = bd.multi;
    return {multi, bd};
  }

  LatentState s0 = m.encode(input);
  Tensor z_p;  // no static parameter in this dataset family

  if (weights.reconstruction) {
    Tensor l = attributed("reconstruction", [&]() {
      return point_loss(m.decode_state(s0), detail::gather_recon_targets(batch));
    });
    bd.recons = l.item();
    terms.push_back(l);
  }

  Tensor consistency_sum;
  Tensor multi_sum;
  LatentState s = s0;
  for (std::size_t step = 1; step <= M; ++step) {
    s = m.evolve(s, z_p);
    if (weights.multi_step) {
      Tensor l = attributed("multi-step", [&]() {
        Tensor pred = m.decode_state(s);
        Tensor target = detail::gather_step_targets(batch, step);
        return use_nll ? gaussian_nll(pred, m.decode_uncertainty(s), target)
                       : point_loss(pred, target);
      });
      bd.step_losses.push_back(l.item());
      Tensor weighted = mul_scalar(l, weights.alpha[step - 1]);
      multi_sum = multi_sum.defined() ? add(multi_sum, weighted) : weighted;
    }
    if (weights.consistency) {
      Tensor c = attributed("consistency", [&]() {
        Tensor z_target;
        {
          NoGradGuard ng;  // the target branch is a constant
          z_target = m.encode(detail::gather_shifted_windows(batch, step)).z;
        }
        return consistency_ratio(s.z, z_target, weights.consistency_eps);
      });
      consistency_sum = consistency_sum.defined() ? add(consistency_sum, c) : c;
    }
  }
  if (multi_sum.defined()) {
    bd.multi = multi_sum.item();
    terms.push_back(multi_sum);
  }
  if (consistency_sum.defined()) {
    bd.consistency = consistency_sum.item();
    terms.push_back(consistency_sum);
  }

  if (terms.empty()) throw ConfigError("compute_loss: all loss terms disabled");
  Tensor total = terms[0];
  for (std::size_t i = 1; i < terms.size(); ++i) total = add(total, terms[i]);
  bd.total = total.item();
  return {total, bd};
}

// ---- training loops -------------------------------------------------------

struct EpochMetrics {
  std::size_t epoch = 0;
  double total = 0.0, multi = 0.0, recons = 0.0, consistency = 0.0;
  double lr = 0.0;
};

struct TrainResult {
  SurrogateModel model;
  std::vector<EpochMetrics> history;
};

inline double cosine_lr(double lr0, double lr_end, std::size_t epoch, std::size_t epochs) {
  if (epochs <= 1) return lr0;
  const double t = static_cast<double>(epoch) / static_cast<double>(epochs - 1);
  return lr_end + 0.5 * (lr0 - lr_end) * (1.0 + std::cos(3.14159265358979323846 * t));
}

// Adam over seeded-shuffled minibatches; deterministic for a fixed seed.
inline TrainResult train_model(const std::vector<BundledWindow>& all_windows,
                               const TrainRunConfig& cfg, const ModelConfig& mcfg) {
  cfg.validate();
  if (cfg.loss != mcfg.loss) {
    throw ConfigError("train loss flavor '" + cfg.loss + "' disagrees with model flavor '" +
                      mcfg.loss + "'");
  }
  std::vector<BundledWindow> windows;
  for (std::size_t i = 0; i < all_windows.size(); i += cfg.window_stride) {
    windows.push_back(all_windows[i]);
  }
  if (windows.empty()) throw ConfigError("train_model: empty window set");

  TrainResult result;
  result.model = SurrogateModel::init(mcfg, cfg.seed);
  LossWeights weights = LossWeights::defaults(mcfg.horizon);
  if (!mcfg.latent) {
    weights.reconstruction = false;
    weights.consistency = false;
  }

  std::vector<Tensor> params = result.model.parameters();
  AdamState opt(cfg.adam);
  const std::size_t nb = windows.size();

  for (std::size_t epoch = 0; epoch < cfg.epochs; ++epoch) {
    opt.cfg.lr = cosine_lr(cfg.lr, cfg.lr_end, epoch, cfg.epochs);
    Rng shuffle_rng(seed_for(cfg.seed, "shuffle/" + std::to_string(epoch)));
    const std::vector<std::size_t> perm = shuffle_rng.permutation(nb);

    EpochMetrics em;
    em.epoch = epoch;
    em.lr = opt.cfg.lr;
    std::size_t batches = 0;
    for (std::size_t ofs = 0; ofs < nb; ofs += cfg.batch) {
      const std::size_t take = std::min(cfg.batch, nb - ofs);
      std::vector<BundledWindow> batch(take);
      for (std::size_t i = 0; i < take; ++i) batch[i] = windows[perm[ofs + i]];
      zero_grads(params);
      GradModeGuard grads_on(true);
      try {
        auto [loss, bd] = compute_loss(result.model, batch, weights);
        if (!std::isfinite(bd.total) || bd.total > cfg.divergence_threshold) {
          throw DivergenceError("training diverged at epoch " + std::to_string(epoch) +
                                ": loss = " + std::to_string(bd.total));
        }
        loss.backward();
        em.total += bd.total;
        em.multi += bd.multi;
        em.recons += bd.recons;
        em.consistency += bd.consistency;
      } catch (const DivergenceError&) {
        throw;
      } catch (const NumericError& e) {
        throw DivergenceError("training diverged at epoch " + std::to_string(epoch) + ": " +
                              e.what());
      }
      adam_step(params, opt);
      ++batches;
    }
    const double inv = 1.0 / static_cast<double>(batches);
    em.total *= inv;
    em.multi *= inv;
    em.recons *= inv;
    em.consistency *= inv;
    result.history.push_back(em);
  }
  return result;
}

// K independent trainings on identical data with seeds seed+0 .. seed+K-1.
// Members run concurrently; any member failure fails the ensemble.
inline std::vector<TrainResult> train_ensemble(const std::vector<BundledWindow>& windows,
                                               const TrainRunConfig& cfg,
                                               const ModelConfig& mcfg) {
  cfg.validate();
  std::vector<TrainResult> members(cfg.ensemble);
  parallel_for(cfg.ensemble, [&](std::size_t k) {
    TrainRunConfig member_cfg = cfg;
    member_cfg.seed = cfg.seed + k;
    try {
      members[k] = train_model(windows, member_cfg, mcfg);
    } catch (const DivergenceError& e) {
      throw DivergenceError("ensemble member " + std::to_string(k) + ": " + e.what());
    }
  });
  return members;
}

inline void write_metrics_csv(const std::filesystem::path& path,
                              const std::vector<TrainResult>& members) {
  std::ofstream os(path);
  if (!os) throw IoError("cannot write " + path.string());
  os << "member,epoch,lr,total,multi_step,reconstruction,consistency\n";
  for (std::size_t k = 0; k < members.size(); ++k) {
    for (const EpochMetrics& em : members[k].history) {
      os << k << "," << em.epoch << "," << em.lr << "," << em.total << "," << em.multi << ","
         << em.recons << "," << em.consistency << "\n";
    }
  }
}

}  // namespace leuq
