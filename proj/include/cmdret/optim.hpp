#pragma once

#include <cmath>
#include <cstddef>
#include <cstdint>
#include <map>
#include <numbers>
#include <string>
#include <vector>

#include "cmdret/errors.hpp"
#include "cmdret/params.hpp"

namespace cmdret {

enum class DecayShape { linear, cosine, exponential };
enum class WeightDecayMode { decoupled, coupled };

struct TrainConfig {
  std::size_t batch_size = 8;
  std::size_t total_steps = 500;
  std::size_t warmup_steps = 50;
  double peak_lr = 5e-3;
  double final_lr = 1e-8;
  double weight_decay = 1e-6;
  double alpha = 0.5;
  double noise_ratio = 0.30;
  std::uint64_t seed = 0;
  DecayShape decay = DecayShape::linear;
  WeightDecayMode weight_decay_mode = WeightDecayMode::decoupled;

  /// Full-scale schedule: 60k steps, 4k warmup, batch 128, peak 1e-4.
  static TrainConfig full_scale() {
    TrainConfig c;
    c.batch_size = 128;
    c.total_steps = 60000;
    c.warmup_steps = 4000;
    c.peak_lr = 1e-4;
    return c;
  }

  void validate() const {
    if (!(warmup_steps > 0 && warmup_steps < total_steps)) {
      throw ConfigError("need 0 < warmup_steps < total_steps, got warmup " + std::to_string(warmup_steps) +
                        " of " + std::to_string(total_steps));
    }
    if (!(peak_lr > 0.0) || !(final_lr >= 0.0) || final_lr > peak_lr) {
      throw ConfigError("need 0 <= final_lr <= peak_lr and peak_lr > 0");
    }
    if (decay == DecayShape::exponential && !(final_lr > 0.0)) {
      throw ConfigError("exponential decay needs final_lr > 0");
    }
    if (!(weight_decay >= 0.0)) throw ConfigError("weight_decay must be non-negative");
    if (!(alpha >= 0.0)) throw ConfigError("alpha must be non-negative");
    if (!(noise_ratio >= 0.0 && noise_ratio < 1.0)) throw ConfigError("noise_ratio must lie in [0, 1)");
    if (batch_size < 1) throw ConfigError("batch_size must be positive");
    if (batch_size < 2 && alpha > 0.0) {
      throw ConfigError("batch_size 1 with alpha > 0: patch noise needs a donor item");
    }
  }
};

/// Linear warmup from 0 to peak_lr, then decay to final_lr at total_steps.
inline double lr_at_step(std::size_t step, const TrainConfig& cfg) {
  if (step > cfg.total_steps) {
    throw ContractError("step " + std::to_string(step) + " past total_steps " + std::to_string(cfg.total_steps));
  }
  if (step <= cfg.warmup_steps) {
    return cfg.peak_lr * static_cast<double>(step) / static_cast<double>(cfg.warmup_steps);
  }
  // Fraction of the decay phase still remaining: 1 at warmup end, 0 at the end.
  const double remain = static_cast<double>(cfg.total_steps - step) /
                        static_cast<double>(cfg.total_steps - cfg.warmup_steps);
  switch (cfg.decay) {
    case DecayShape::linear:
      return cfg.final_lr + (cfg.peak_lr - cfg.final_lr) * remain;
    case DecayShape::cosine:
      return cfg.final_lr + (cfg.peak_lr - cfg.final_lr) * 0.5 * (1.0 - std::cos(std::numbers::pi * remain));
    case DecayShape::exponential:
      return cfg.final_lr * std::pow(cfg.peak_lr / cfg.final_lr, remain);
  }
  return cfg.final_lr;
}

struct Moments {
  Tensor m;
  Tensor v;
};

struct OptimState {
  std::map<std::string, Moments> moments;
  std::uint64_t step = 0;
  double beta1 = 0.9;
  double beta2 = 0.999;
  double eps = 1e-8;
};

/// One bias-corrected Adam update over the `trainable` parameters.
///
/// Decoupled mode shrinks θ by lr·wd·θ outside the adaptive update; coupled
/// mode adds wd·θ to the gradient. Only parameters flagged `decay` are
/// decayed.
inline void adam_step(ParamStore& params, const GradMap& grads, OptimState& state, double lr,
                      double weight_decay, const std::vector<std::string>& trainable,
                      WeightDecayMode mode = WeightDecayMode::decoupled) {
  for (const auto& name : trainable) {
    if (!grads.contains(name)) throw ContractError("no gradient for parameter " + name);
  }
  ++state.step;
  const double t = static_cast<double>(state.step);
  const double c1 = 1.0 - std::pow(state.beta1, t);
  const double c2 = 1.0 - std::pow(state.beta2, t);
  for (const auto& name : trainable) {
    Parameter& p = params.at(name);
    const Tensor& g = grads.at(name);
    require_same_shape(p.value, g, "adam_step");
    auto [it, fresh] = state.moments.try_emplace(name, Moments{Tensor(g.shape()), Tensor(g.shape())});
    Moments& mo = it->second;
    const double wd = p.decay ? weight_decay : 0.0;
    for (std::size_t i = 0; i < g.size(); ++i) {
      double gi = g[i];
      if (mode == WeightDecayMode::coupled) gi += wd * p.value[i];
      mo.m[i] = state.beta1 * mo.m[i] + (1.0 - state.beta1) * gi;
      mo.v[i] = state.beta2 * mo.v[i] + (1.0 - state.beta2) * gi * gi;
      const double mhat = mo.m[i] / c1;
      const double vhat = mo.v[i] / c2;
      double theta = p.value[i];
      if (mode == WeightDecayMode::decoupled) theta -= lr * wd * theta;
      p.value[i] = theta - lr * mhat / (std::sqrt(vhat) + state.eps);
    }
  }
}

}  // namespace cmdret
