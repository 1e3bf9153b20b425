#pragma once

#include <algorithm>
#include <cmath>
#include <map>
#include <string>

#include "whistle/numerics/params.hpp"

namespace whistle {

struct AdamConfig {
  double lr = 1e-3;
  double beta1 = 0.9;
  double beta2 = 0.999;
  double eps = 1e-8;
  // Linear warmup from lr/warmup to lr over this many steps; 0 disables.
  int warmup_steps = 0;
  // Linear decay to zero at this step after warmup; 0 keeps lr constant.
  int decay_steps = 0;
};

template <class T>
struct OptimizerState {
  AdamConfig config;
  std::int64_t step = 0;
  std::map<std::string, Tensor<T>> m;
  std::map<std::string, Tensor<T>> v;
};

inline double scheduled_lr(const AdamConfig& cfg, std::int64_t step) {
  if (cfg.warmup_steps > 0 && step < cfg.warmup_steps)
    return cfg.lr * static_cast<double>(step + 1) / static_cast<double>(cfg.warmup_steps);
  if (cfg.decay_steps <= cfg.warmup_steps) return cfg.lr;
  const double left = static_cast<double>(cfg.decay_steps - step) / static_cast<double>(cfg.decay_steps - cfg.warmup_steps);
  return cfg.lr * std::clamp(left, 0.0, 1.0);
}

/// One bias-corrected Adam update of every parameter selected by `which`.
/// Moments live in the shared state; parameters outside `which` are untouched.
template <class T>
void adam_step(ParamStore<T>& params, const GradMap<T>& grads, OptimizerState<T>& state,
               const ParamFilter& which = all_params) {
  for (const auto& [name, p] : params.tensors()) {
    if (!which(name)) continue;
    auto g = grads.find(name);
    if (g == grads.end()) throw Error("adam_step: missing gradient for parameter '" + name + "'");
    if (g->second.shape() != p.shape()) {
      throw ShapeError("adam_step: gradient for '" + name + "' has shape " + shape_str(g->second.shape()) +
                       ", parameter has " + shape_str(p.shape()));
    }
  }
  const auto& cfg = state.config;
  const std::int64_t t = state.step + 1;
  const double lr = scheduled_lr(cfg, state.step);
  const double bc1 = 1.0 - std::pow(cfg.beta1, static_cast<double>(t));
  const double bc2 = 1.0 - std::pow(cfg.beta2, static_cast<double>(t));
  for (auto& [name, p] : params.tensors()) {
    if (!which(name)) continue;
    const auto& g = grads.at(name);
    auto& m = state.m.try_emplace(name, Tensor<T>(p.shape())).first->second;
    auto& v = state.v.try_emplace(name, Tensor<T>(p.shape())).first->second;
    // Moments and update run in T; the step size folds in both bias corrections.
    const T b1 = static_cast<T>(cfg.beta1), b2 = static_cast<T>(cfg.beta2);
    const T c1 = static_cast<T>(1.0 - cfg.beta1), c2 = static_cast<T>(1.0 - cfg.beta2);
    const T step_size = static_cast<T>(lr * std::sqrt(bc2) / bc1);
    const T eps = static_cast<T>(cfg.eps * std::sqrt(bc2));
    T* pp = p.data();
    T* mp = m.data();
    T* vp = v.data();
    const T* gp = g.data();
    const size_t n = p.size();
    for (size_t i = 0; i < n; ++i) {
      const T gi = gp[i];
      const T mi = b1 * mp[i] + c1 * gi;
      const T vi = b2 * vp[i] + c2 * gi * gi;
      mp[i] = mi;
      vp[i] = vi;
      pp[i] -= step_size * mi / (std::sqrt(vi) + eps);
    }
  }
  state.step = t;
}

}  // namespace whistle
