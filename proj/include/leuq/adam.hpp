#pragma once

#include <cmath>
#include <cstddef>
#include <string>
#include <vector>

#include "leuq/common.hpp"
#include "leuq/tensor.hpp"

namespace leuq {

struct AdamConfig {
  double lr = 1e-3;
  double beta1 = 0.9;
  double beta2 = 0.999;
  double eps = 1e-8;
};

// First/second moment buffers, one pair per parameter, plus the step counter.
struct AdamState {
  AdamConfig cfg;
  std::vector<std::vector<double>> m;
  std::vector<std::vector<double>> v;
  long step = 0;

  explicit AdamState(AdamConfig c = {}) : cfg(c) {}
};

// Standard Adam update with bias correction. Parameters are updated in place
// from their accumulated grads; grads are left untouched (caller zeroes).
inline void adam_step(std::vector<Tensor>& params, AdamState& state) {
  if (state.m.empty()) {
    state.m.resize(params.size());
    state.v.resize(params.size());
    for (std::size_t i = 0; i < params.size(); ++i) {
      state.m[i].assign(params[i].numel(), 0.0);
      state.v[i].assign(params[i].numel(), 0.0);
    }
  }
  if (state.m.size() != params.size()) {
    throw ShapeError("adam_step: state tracks " + std::to_string(state.m.size()) +
                     " parameters, got " + std::to_string(params.size()));
  }
  state.step += 1;
  const double b1 = state.cfg.beta1, b2 = state.cfg.beta2;
  const double bc1 = 1.0 - std::pow(b1, static_cast<double>(state.step));
  const double bc2 = 1.0 - std::pow(b2, static_cast<double>(state.step));
  for (std::size_t i = 0; i < params.size(); ++i) {
    if (state.m[i].size() != params[i].numel()) {
      throw ShapeError("adam_step: moment/parameter shape mismatch at index " + std::to_string(i));
    }
    auto g = params[i].grad();
    auto w = params[i].mutable_data();
    auto& m = state.m[i];
    auto& v = state.v[i];
    for (std::size_t j = 0; j < w.size(); ++j) {
      m[j] = b1 * m[j] + (1.0 - b1) * g[j];
      v[j] = b2 * v[j] + (1.0 - b2) * g[j] * g[j];
      const double mhat = m[j] / bc1;
      const double vhat = v[j] / bc2;
      w[j] -= state.cfg.lr * mhat / (std::sqrt(vhat) + state.cfg.eps);
    }
  }
}

inline void zero_grads(std::vector<Tensor>& params) {
  for (Tensor& p : params) p.zero_grad();
}

}  // namespace leuq
