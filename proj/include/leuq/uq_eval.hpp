#pragma once

#include <algorithm>
#include <cmath>
#include <filesystem>
#include <fstream>
#include <numeric>
#include <string>
#include <vector>

#include <json.hpp>

#include "leuq/common.hpp"
#include "leuq/dataset.hpp"
#include "leuq/model.hpp"
#include "leuq/parallel.hpp"

namespace leuq {

inline double normal_cdf(double z) { return 0.5 * std::erfc(-z / 1.4142135623730950488); }

// Flattened predictions with matching truth. `sample_stride` groups elements
// into samples for the per-sample relative L2 (0 means one sample).
struct PredictiveSet {
  std::vector<double> mu;
  std::vector<double> sigma;
  std::vector<double> y;
  std::size_t sample_stride = 0;
  std::string tag;

  std::size_t size() const { return mu.size(); }

  void validate() const {
    if (mu.empty() || mu.size() != sigma.size() || mu.size() != y.size()) {
      throw ShapeError("predictive set arrays must be non-empty and congruent");
    }
    if (sample_stride != 0 && mu.size() % sample_stride != 0) {
      throw ShapeError("predictive set length is not a multiple of the sample stride");
    }
    for (std::size_t i = 0; i < mu.size(); ++i) {
      if (!std::isfinite(mu[i]) || !std::isfinite(sigma[i]) || !std::isfinite(y[i])) {
        throw NumericError("predictive set contains non-finite values");
      }
      if (sigma[i] <= 0.0) throw NumericError("predictive sigma must be positive");
    }
  }
};

// Gaussian-mixture pooling of K member predictions:
//   mu* = mean(mu_i),  sigma*^2 = mean(sigma_i^2 + mu_i^2) - mu*^2.
// Deterministic members contribute sigma_i = 0, reducing sigma* to the
// population spread of the means. Output sigma is floored at sigma_min.
struct MemberPrediction {
  std::vector<double> mu;
  std::vector<double> sigma;  // empty means all-zero (deterministic member)
};

struct AggregatedPrediction {
  std::vector<double> mu;
  std::vector<double> sigma;
};

inline AggregatedPrediction ensemble_aggregate(const std::vector<MemberPrediction>& members,
                                               double sigma_min = 1e-4) {
  if (members.empty()) throw ConfigError("ensemble_aggregate: empty member list");
  const std::size_t n = members[0].mu.size();
  for (const auto& m : members) {
    if (m.mu.size() != n || (!m.sigma.empty() && m.sigma.size() != n)) {
      throw ShapeError("ensemble_aggregate: member shapes disagree");
    }
  }
  const double inv_k = 1.0 / static_cast<double>(members.size());
  AggregatedPrediction out;
  out.mu.assign(n, 0.0);
  out.sigma.assign(n, 0.0);
  for (const auto& m : members) {
    for (std::size_t i = 0; i < n; ++i) {
      const double s = m.sigma.empty() ? 0.0 : m.sigma[i];
      out.mu[i] += m.mu[i] * inv_k;
      out.sigma[i] += (s * s + m.mu[i] * m.mu[i]) * inv_k;
    }
  }
  for (std::size_t i = 0; i < n; ++i) {
    const double var = std::max(out.sigma[i] - out.mu[i] * out.mu[i], 0.0);
    out.sigma[i] = std::max(std::sqrt(var), sigma_min);
  }
  return out;
}

// ---- calibration ----------------------------------------------------------

// Coverage convention for the calibration curve. one_sided_quantile follows
//   o_j = (1/n) sum 1[Phi((y-mu)/sigma) <= p_j];
// centered_interval counts |y-mu| within the symmetric p_j-confidence band,
// the convention behind the degenerate sigma->inf coverage-of-one limit.
enum class CoverageType { one_sided_quantile, centered_interval };

struct CalibrationCurve {
  std::vector<double> p;  // expected proportions, uniform on [0,1]
  std::vector<double> o;  // observed proportions
};

inline CalibrationCurve calibration_curve(const PredictiveSet& ps, std::size_t bins = 100,
                                          CoverageType type = CoverageType::one_sided_quantile) {
  if (bins < 2) throw ConfigError("calibration_curve needs at least 2 bins");
  ps.validate();
  const std::size_t n = ps.size();
  std::vector<double> q(n);
  for (std::size_t i = 0; i < n; ++i) {
    const double z = (ps.y[i] - ps.mu[i]) / ps.sigma[i];
    q[i] = (type == CoverageType::one_sided_quantile)
               ? normal_cdf(z)
               : 2.0 * normal_cdf(std::fabs(z)) - 1.0;  // central coverage level of |z|
  }
  std::sort(q.begin(), q.end());
  CalibrationCurve curve;
  curve.p.resize(bins);
  curve.o.resize(bins);
  for (std::size_t j = 0; j < bins; ++j) {
    const double pj = static_cast<double>(j) / static_cast<double>(bins - 1);
    curve.p[j] = pj;
    const auto it = std::upper_bound(q.begin(), q.end(), pj);
    curve.o[j] = static_cast<double>(it - q.begin()) / static_cast<double>(n);
  }
  return curve;
}

struct CalibrationMetrics {
  double ma = 0.0;     // trapezoidal area between the curve and the diagonal
  double mace = 0.0;   // mean |o - p|
  double rmsce = 0.0;  // sqrt(mean (o - p)^2)
};

inline CalibrationMetrics calibration_metrics(const CalibrationCurve& curve) {
  const std::size_t bins = curve.p.size();
  if (bins < 2 || curve.o.size() != bins) throw ShapeError("malformed calibration curve");
  CalibrationMetrics m;
  double sq = 0.0;
  for (std::size_t j = 0; j < bins; ++j) {
    const double e = std::fabs(curve.o[j] - curve.p[j]);
    m.mace += e;
    sq += e * e;
    if (j + 1 < bins) {
      const double e2 = std::fabs(curve.o[j + 1] - curve.p[j + 1]);
      m.ma += 0.5 * (e + e2) * (curve.p[j + 1] - curve.p[j]);
    }
  }
  m.mace /= static_cast<double>(bins);
  m.rmsce = std::sqrt(sq / static_cast<double>(bins));
  return m;
}

// ---- point metrics ----------------------------------------------------------

struct PointMetrics {
  double l2 = 0.0;   // ||mu - y|| / ||y||, per sample, averaged
  double mae = 0.0;  // mean |mu - y|
};

inline PointMetrics point_metrics(const PredictiveSet& ps) {
  if (ps.mu.empty() || ps.mu.size() != ps.y.size()) {
    throw ShapeError("point_metrics: malformed predictive set");
  }
  const std::size_t stride = ps.sample_stride == 0 ? ps.mu.size() : ps.sample_stride;
  if (ps.mu.size() % stride != 0) throw ShapeError("point_metrics: bad sample stride");
  const std::size_t samples = ps.mu.size() / stride;
  PointMetrics pm;
  for (std::size_t s = 0; s < samples; ++s) {
    double num = 0.0, den = 0.0;
    for (std::size_t i = s * stride; i < (s + 1) * stride; ++i) {
      const double d = ps.mu[i] - ps.y[i];
      num += d * d;
      den += ps.y[i] * ps.y[i];
      pm.mae += std::fabs(d);
    }
    if (den == 0.0) {
      throw NumericError("point_metrics: degenerate target with zero norm in sample " +
                         std::to_string(s));
    }
    pm.l2 += std::sqrt(num / den);
  }
  pm.l2 /= static_cast<double>(samples);
  pm.mae /= static_cast<double>(ps.mu.size());
  return pm;
}

// ---- full evaluation protocol ----------------------------------------------

struct CalibrationReport {
  CalibrationCurve curve;
  double ma = 0.0, mace = 0.0, rmsce = 0.0, l2 = 0.0, mae = 0.0;
  std::size_t n = 0;

  struct IntervalRecord {
    double center, half_width, truth;
  };
  std::vector<IntervalRecord> ordered_intervals;  // sorted by half-width

  struct StepMetrics {
    std::size_t step;
    double ma, mace, rmsce, l2, mae;
  };
  std::vector<StepMetrics> per_step;
};

inline CalibrationReport report_from_predictions(const PredictiveSet& pooled,
                                                 const std::vector<PredictiveSet>& per_step,
                                                 std::size_t bins = 100,
                                                 CoverageType type = CoverageType::one_sided_quantile) {
  CalibrationReport rep;
  rep.curve = calibration_curve(pooled, bins, type);
  const CalibrationMetrics cm = calibration_metrics(rep.curve);
  rep.ma = cm.ma;
  rep.mace = cm.mace;
  rep.rmsce = cm.rmsce;
  const PointMetrics pm = point_metrics(pooled);
  rep.l2 = pm.l2;
  rep.mae = pm.mae;
  rep.n = pooled.size();

  rep.ordered_intervals.reserve(pooled.size());
  for (std::size_t i = 0; i < pooled.size(); ++i) {
    rep.ordered_intervals.push_back({pooled.mu[i], 1.959963984540054 * pooled.sigma[i], pooled.y[i]});
  }
  std::sort(rep.ordered_intervals.begin(), rep.ordered_intervals.end(),
            [](const auto& a, const auto& b) { return a.half_width < b.half_width; });

  for (std::size_t s = 0; s < per_step.size(); ++s) {
    const CalibrationMetrics scm = calibration_metrics(calibration_curve(per_step[s], bins, type));
    const PointMetrics spm = point_metrics(per_step[s]);
    rep.per_step.push_back({s + 1, scm.ma, scm.mace, scm.rmsce, spm.l2, spm.mae});
  }
  return rep;
}

// Runs the rollout protocol over every maximal test window, aggregates the
// ensemble per step, pools (mu*, sigma*, y) over steps/pixels/windows.
inline CalibrationReport evaluate_rollout(const std::vector<SurrogateModel>& members,
                                          const TrajectorySet& test, RolloutMode mode,
                                          std::size_t horizon, std::size_t bins = 100,
                                          CoverageType type = CoverageType::one_sided_quantile) {
  if (members.empty()) throw ConfigError("evaluate_rollout: no ensemble members");
  const ModelConfig& cfg = members[0].cfg;
  for (const auto& m : members) {
    if (m.cfg.grid != cfg.grid || m.cfg.history != cfg.history || m.cfg.bundle != cfg.bundle) {
      throw ConfigError("evaluate_rollout: ensemble members disagree on geometry");
    }
  }
  if (test.grid != cfg.grid) {
    throw ConfigError("evaluate_rollout: model grid " + std::to_string(cfg.grid) +
                      " does not match dataset grid " + std::to_string(test.grid));
  }
  const std::size_t S = cfg.bundle;
  const std::vector<BundledWindow> windows = make_bundled_windows(test, cfg.history, horizon, S);
  const std::size_t nn = test.grid * test.grid;
  const std::size_t frame_elems = S * nn;
  const double sigma_min = cfg.sigma_min;

  // member rollouts, batched over windows
  NoGradGuard ng;
  Tensor inputs = detail::gather_frames(windows, &BundledWindow::input_frame, cfg.history);
  Tensor truth_block;
  if (mode == RolloutMode::teacher_forcing) {
    const std::size_t B = windows.size();
    std::vector<double> data(B * (cfg.history + horizon * S) * nn);
    for (std::size_t b = 0; b < B; ++b) {
      for (std::size_t i = 0; i < cfg.history + horizon * S; ++i) {
        auto f = test.frame(windows[b].traj, windows[b].start + i);
        std::copy(f.begin(), f.end(), data.begin() + (b * (cfg.history + horizon * S) + i) * nn);
      }
    }
    truth_block =
        Tensor::from_data({windows.size(), cfg.history + horizon * S, test.grid, test.grid},
                          std::move(data));
  }

  std::vector<std::vector<RolloutStep>> runs(members.size());
  parallel_for(members.size(), [&](std::size_t k) {
    NoGradGuard inner;
    runs[k] = rollout(members[k], inputs, Tensor(), horizon, mode, truth_block);
  });

  const std::size_t B = windows.size();
  PredictiveSet pooled;
  pooled.sample_stride = frame_elems;
  pooled.tag = cfg.variant_string() + "/" +
               (mode == RolloutMode::autoregressive ? "autoregressive" : "teacher_forcing");
  std::vector<PredictiveSet> per_step(horizon);

  std::vector<MemberPrediction> mp(members.size());
  for (std::size_t step = 0; step < horizon; ++step) {
    for (std::size_t k = 0; k < members.size(); ++k) {
      const RolloutStep& rs = runs[k][step];
      mp[k].mu.assign(rs.mean.data().begin(), rs.mean.data().end());
      if (rs.sigma.defined()) {
        mp[k].sigma.assign(rs.sigma.data().begin(), rs.sigma.data().end());
      } else {
        mp[k].sigma.clear();
      }
    }
    AggregatedPrediction agg = ensemble_aggregate(mp, sigma_min);
    // truth for this step: frames [history + step*S, history + (step+1)*S)
    std::vector<double> yb(B * frame_elems);
    for (std::size_t b = 0; b < B; ++b) {
      for (std::size_t i = 0; i < S; ++i) {
        auto f = windows[b].target_frame(step * S + i);
        std::copy(f.begin(), f.end(), yb.begin() + (b * S + i) * nn);
      }
    }
    per_step[step].mu = agg.mu;
    per_step[step].sigma = agg.sigma;
    per_step[step].y = yb;
    per_step[step].sample_stride = frame_elems;
    pooled.mu.insert(pooled.mu.end(), agg.mu.begin(), agg.mu.end());
    pooled.sigma.insert(pooled.sigma.end(), agg.sigma.begin(), agg.sigma.end());
    pooled.y.insert(pooled.y.end(), yb.begin(), yb.end());
  }

  return report_from_predictions(pooled, per_step, bins, type);
}

// Mean relative L2 of decode(encode(window)) against the window's own bundle,
// over every maximal window of the set.
inline double reconstruction_relative_l2(const SurrogateModel& m, const TrajectorySet& data) {
  NoGradGuard ng;
  const auto windows = make_bundled_windows(data, m.cfg.history, 1, m.cfg.bundle);
  Tensor inputs = detail::gather_frames(windows, &BundledWindow::input_frame, m.cfg.history);
  Tensor recon = m.decode_state(m.encode(inputs));
  Tensor target = detail::gather_recon_targets(windows);
  const std::size_t stride = m.cfg.bundle * m.cfg.grid * m.cfg.grid;
  double acc = 0.0;
  const std::size_t samples = windows.size();
  for (std::size_t s = 0; s < samples; ++s) {
    double num = 0.0, den = 0.0;
    for (std::size_t i = s * stride; i < (s + 1) * stride; ++i) {
      const double d = recon.at(i) - target.at(i);
      num += d * d;
      den += target.at(i) * target.at(i);
    }
    acc += std::sqrt(num / den);
  }
  return acc / static_cast<double>(samples);
}

// ---- emission ---------------------------------------------------------------

inline nlohmann::json report_to_json(const CalibrationReport& rep) {
  nlohmann::json j;
  j["MA"] = rep.ma;
  j["MACE"] = rep.mace;
  j["RMSCE"] = rep.rmsce;
  j["L2"] = rep.l2;
  j["MAE"] = rep.mae;
  j["n"] = rep.n;
  j["curve"] = {{"p", rep.curve.p}, {"o", rep.curve.o}};
  auto steps = nlohmann::json::array();
  for (const auto& s : rep.per_step) {
    steps.push_back({{"step", s.step},
                     {"MA", s.ma},
                     {"MACE", s.mace},
                     {"RMSCE", s.rmsce},
                     {"L2", s.l2},
                     {"MAE", s.mae}});
  }
  j["per_step"] = std::move(steps);
  return j;
}

inline void write_report_files(const CalibrationReport& rep, const std::filesystem::path& dir,
                               const std::string& stem = "report") {
  std::filesystem::create_directories(dir);
  {
    std::ofstream os(dir / (stem + ".json"));
    if (!os) throw IoError("cannot write report JSON in " + dir.string());
    os << report_to_json(rep).dump(2) << "\n";
  }
  {
    std::ofstream os(dir / "calibration_curve.csv");
    os << "p,o\n";
    for (std::size_t j = 0; j < rep.curve.p.size(); ++j) {
      os << rep.curve.p[j] << "," << rep.curve.o[j] << "\n";
    }
  }
  {
    std::ofstream os(dir / "ordered_intervals.csv");
    os << "index,center,half_width,truth\n";
    for (std::size_t i = 0; i < rep.ordered_intervals.size(); ++i) {
      const auto& r = rep.ordered_intervals[i];
      os << i << "," << r.center << "," << r.half_width << "," << r.truth << "\n";
    }
  }
  {
    std::ofstream os(dir / "per_step_metrics.csv");
    os << "step,MA,MACE,RMSCE,L2,MAE\n";
    for (const auto& s : rep.per_step) {
      os << s.step << "," << s.ma << "," << s.mace << "," << s.rmsce << "," << s.l2 << "," << s.mae
         << "\n";
    }
  }
}

}  // namespace leuq
