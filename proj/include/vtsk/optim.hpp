// SPDX-License-Identifier: Apache-2.0
//
// Training mechanics: Adam (optionally with bfloat16-emulated momentum), the
// modified Adafactor (rank-1 factored second moment, bf16 first moment, no
// relative LR scaling, beta2 clipped at 0.999), pattern-based decoupled
// weight decay, warmup/cooldown learning-rate schedules, global-norm gradient
// clipping and Polyak averaging.

#pragma once

#include <cmath>
#include <cstdint>
#include <cstring>
#include <regex>
#include <string>
#include <vector>

#include "vtsk/common.hpp"
#include "vtsk/tensor.hpp"

namespace vtsk {

// ---------------------------------------------------------------------------
// bfloat16 storage emulation: compute stays 64-bit, values are rounded onto
// the bf16 grid (8 exponent bits, 7 stored mantissa bits) on store.
// ---------------------------------------------------------------------------

/// Round-to-nearest-even onto the set of bfloat16-representable values.
/// Non-finite inputs pass through. Idempotent.
inline double bf16_round(double x) {
  if (!std::isfinite(x)) return x;
  const float f = static_cast<float>(x);  // first rounding: double -> f32
  std::uint32_t bits;
  std::memcpy(&bits, &f, sizeof(bits));
  const std::uint32_t lsb = (bits >> 16) & 1u;
  bits += 0x7FFFu + lsb;  // second rounding: f32 -> bf16, ties to even
  bits &= 0xFFFF0000u;
  float out;
  std::memcpy(&out, &bits, sizeof(out));
  return static_cast<double>(out);
}

inline void bf16_round_inplace(Tensor& t) {
  for (auto& v : t.data) v = bf16_round(v);
}

// ---------------------------------------------------------------------------
// Optimizer configuration and state
// ---------------------------------------------------------------------------

struct OptimConfig {
  double beta1 = 0.9;
  double beta2_cap = 0.999;       // Adafactor's beta2 ramp is clipped here
  double beta2_exponent = 0.8;    // ramp: 1 - t^(-exponent)
  double eps_adam = 1e-8;
  double eps_factored = 1e-30;    // added inside squared gradients
  double update_clip_threshold = 1.0;  // RMS cap on the Adafactor update; <= 0 disables
  double grad_clip_norm = 1.0;

  void validate() const {
    if (beta1 < 0.0 || beta1 >= 1.0) throw ConfigError("beta1 must be in [0, 1)");
    if (beta2_cap <= 0.0 || beta2_cap >= 1.0) throw ConfigError("beta2_cap must be in (0, 1)");
  }
};

enum class MomentumStorage { kFull64, kBf16 };

enum class OptimizerMode { kAdam, kAdamHp, kAdafactorMod };

inline std::string to_string(OptimizerMode m) {
  switch (m) {
    case OptimizerMode::kAdam: return "adam";
    case OptimizerMode::kAdamHp: return "adam-hp";
    case OptimizerMode::kAdafactorMod: return "adafactor-mod";
  }
  throw ValueError("bad optimizer mode");
}

inline OptimizerMode optimizer_mode_from(const std::string& s) {
  if (s == "adam") return OptimizerMode::kAdam;
  if (s == "adam-hp") return OptimizerMode::kAdamHp;
  if (s == "adafactor-mod") return OptimizerMode::kAdafactorMod;
  throw ConfigError("unknown optimizer mode '" + s + "' (adam, adam-hp, adafactor-mod)");
}

struct AdamState {
  Tensor m;
  Tensor v;
  std::int64_t t = 0;
  MomentumStorage momentum_storage = MomentumStorage::kFull64;

  static AdamState init(const std::vector<std::int64_t>& shape, MomentumStorage storage) {
    AdamState s;
    s.m = Tensor::zeros(shape);
    s.v = Tensor::zeros(shape);
    s.momentum_storage = storage;
    return s;
  }
};

struct AdafactorState {
  bool factored = false;
  Tensor row_acc;  // [rows], matrices only
  Tensor col_acc;  // [cols], matrices only
  Tensor v;        // full second moment, vectors/scalars only
  Tensor m;        // first moment, stored on the bf16 grid
  std::int64_t t = 0;

  static AdafactorState init(const std::vector<std::int64_t>& shape) {
    AdafactorState s;
    s.factored = shape.size() >= 2;
    if (s.factored) {
      const std::int64_t cols = shape.back();
      const std::int64_t rows = Tensor::numel_of(shape) / cols;
      s.row_acc = Tensor::zeros({rows});
      s.col_acc = Tensor::zeros({cols});
    } else {
      s.v = Tensor::zeros(shape);
    }
    s.m = Tensor::zeros(shape);
    return s;
  }
};

namespace detail {

inline void require_finite_grad(const Tensor& grad, const char* who) {
  for (double g : grad.data)
    if (!std::isfinite(g)) throw ValueError(std::string(who) + ": non-finite gradient, step rejected");
}

inline void require_same_shape(const Tensor& param, const Tensor& grad, const char* who) {
  if (!param.same_shape(grad))
    throw ShapeError(std::string(who) + ": param " + Tensor::shape_str(param.shape) +
                     " vs grad " + Tensor::shape_str(grad.shape));
}

}  // namespace detail

// ---------------------------------------------------------------------------
// Adam, with optional half-precision (bf16-emulated) first moment. The second
// moment is always kept in full precision.
// ---------------------------------------------------------------------------

inline void adam_step(Tensor& param, const Tensor& grad, AdamState& state, double lr,
                      const OptimConfig& cfg = {}) {
  cfg.validate();
  detail::require_same_shape(param, grad, "adam_step");
  detail::require_finite_grad(grad, "adam_step");
  state.t += 1;
  const double b1 = cfg.beta1;
  const double b2 = cfg.beta2_cap;
  const double bc1 = 1.0 - std::pow(b1, static_cast<double>(state.t));
  const double bc2 = 1.0 - std::pow(b2, static_cast<double>(state.t));
  const bool half = state.momentum_storage == MomentumStorage::kBf16;
  for (std::size_t i = 0; i < param.data.size(); ++i) {
    const double g = grad.data[i];
    double m = b1 * state.m.data[i] + (1.0 - b1) * g;
    if (half) m = bf16_round(m);
    state.m.data[i] = m;
    const double v = b2 * state.v.data[i] + (1.0 - b2) * g * g;
    state.v.data[i] = v;
    const double mhat = m / bc1;
    const double vhat = v / bc2;
    param.data[i] -= lr * mhat / (std::sqrt(vhat) + cfg.eps_adam);
  }
}

// ---------------------------------------------------------------------------
// Modified Adafactor.
//
// beta2(t) = min(1 - t^(-0.8), beta2_cap). Matrix parameters keep row/column
// accumulators of G^2 + eps; Vhat = outer(R, C) / sum(R). Vectors and scalars
// keep the full second moment. The update is RMS-clipped, folded into a bf16
// first moment, and applied without any weight-norm-relative LR scaling.
// ---------------------------------------------------------------------------

/// Reconstruction of the factored second moment (matrices), or a copy of the
/// full one (vectors). Exposed for inspection and tests.
inline Tensor adafactor_vhat(const AdafactorState& state, const std::vector<std::int64_t>& shape) {
  if (!state.factored) return state.v;
  const std::int64_t cols = shape.back();
  const std::int64_t rows = Tensor::numel_of(shape) / cols;
  double row_sum = 0.0;
  for (double r : state.row_acc.data) row_sum += r;
  Tensor vhat = Tensor::zeros(shape);
  for (std::int64_t i = 0; i < rows; ++i)
    for (std::int64_t j = 0; j < cols; ++j)
      vhat.data[i * cols + j] = state.row_acc.data[i] * state.col_acc.data[j] / row_sum;
  return vhat;
}

inline double adafactor_beta2(std::int64_t t, const OptimConfig& cfg = {}) {
  return std::min(1.0 - std::pow(static_cast<double>(t), -cfg.beta2_exponent), cfg.beta2_cap);
}

inline void adafactor_step(Tensor& param, const Tensor& grad, AdafactorState& state, double lr,
                           const OptimConfig& cfg = {}) {
  cfg.validate();
  detail::require_same_shape(param, grad, "adafactor_step");
  detail::require_finite_grad(grad, "adafactor_step");
  state.t += 1;
  const double b2 = adafactor_beta2(state.t, cfg);

  Tensor update = grad;
  if (state.factored) {
    const std::int64_t cols = param.shape.back();
    const std::int64_t rows = param.numel() / cols;
    for (std::int64_t i = 0; i < rows; ++i) {
      double rs = 0.0;
      for (std::int64_t j = 0; j < cols; ++j) {
        const double g2 = grad.data[i * cols + j] * grad.data[i * cols + j] + cfg.eps_factored;
        rs += g2;
      }
      state.row_acc.data[i] = b2 * state.row_acc.data[i] + (1.0 - b2) * rs;
    }
    for (std::int64_t j = 0; j < cols; ++j) {
      double cs = 0.0;
      for (std::int64_t i = 0; i < rows; ++i) {
        const double g2 = grad.data[i * cols + j] * grad.data[i * cols + j] + cfg.eps_factored;
        cs += g2;
      }
      state.col_acc.data[j] = b2 * state.col_acc.data[j] + (1.0 - b2) * cs;
    }
    double row_sum = 0.0;
    for (double r : state.row_acc.data) row_sum += r;
    for (std::int64_t i = 0; i < rows; ++i)
      for (std::int64_t j = 0; j < cols; ++j) {
        const double vhat = state.row_acc.data[i] * state.col_acc.data[j] / row_sum;
        update.data[i * cols + j] = grad.data[i * cols + j] / std::sqrt(vhat);
      }
  } else {
    for (std::size_t i = 0; i < param.data.size(); ++i) {
      const double g2 = grad.data[i] * grad.data[i] + cfg.eps_factored;
      state.v.data[i] = b2 * state.v.data[i] + (1.0 - b2) * g2;
      update.data[i] = grad.data[i] / std::sqrt(state.v.data[i]);
    }
  }

  if (cfg.update_clip_threshold > 0.0) {
    double ms = 0.0;
    for (double u : update.data) ms += u * u;
    const double rms = std::sqrt(ms / static_cast<double>(update.numel()));
    if (rms > cfg.update_clip_threshold) {
      const double s = cfg.update_clip_threshold / rms;
      for (auto& u : update.data) u *= s;
    }
  }

  for (std::size_t i = 0; i < param.data.size(); ++i) {
    const double m = bf16_round(cfg.beta1 * state.m.data[i] + (1.0 - cfg.beta1) * update.data[i]);
    state.m.data[i] = m;
    param.data[i] -= lr * m;
  }
}

// ---------------------------------------------------------------------------
// Decoupled weight decay. First matching rule wins; parameters matching no
// rule keep their value (biases, norms). base_wd is the per-step shrink
// coefficient with the learning rate already folded in (wd = 0.03 * lr).
// ---------------------------------------------------------------------------

struct WeightDecayRule {
  std::string pattern;  // full-match regex over the parameter name
  double multiplier = 0.0;
};

inline double decay_multiplier(const std::string& name, const std::vector<WeightDecayRule>& rules) {
  for (const auto& rule : rules) {
    if (rule.multiplier < 0.0) throw ConfigError("weight decay multiplier must be >= 0");
    if (std::regex_match(name, std::regex(rule.pattern))) return rule.multiplier;
  }
  return 0.0;
}

/// params must iterate as (name, Tensor) pairs.
template <typename NamedParams>
void decay_params(NamedParams& params, const std::vector<WeightDecayRule>& rules, double base_wd) {
  if (base_wd < 0.0) throw ConfigError("base weight decay must be >= 0");
  for (auto& [name, tensor] : params) {
    const double mult = decay_multiplier(name, rules);
    if (mult == 0.0) continue;
    const double shrink = base_wd * mult;
    if (shrink >= 1.0)
      throw ConfigError("weight decay " + std::to_string(shrink) + " on '" + name +
                        "' would zero or flip the parameter");
    const double factor = 1.0 - shrink;
    for (auto& v : tensor.data) v *= factor;
  }
}

// ---------------------------------------------------------------------------
// Learning-rate schedules: linear warmup, {linear, constant, rsqrt} main
// phase, and a linear cooldown to zero over the final cooldown_steps.
// ---------------------------------------------------------------------------

enum class DecayType { kLinear, kConstant, kRsqrt };

inline std::string to_string(DecayType d) {
  switch (d) {
    case DecayType::kLinear: return "linear";
    case DecayType::kConstant: return "constant";
    case DecayType::kRsqrt: return "rsqrt";
  }
  throw ValueError("bad decay type");
}

inline DecayType decay_type_from(const std::string& s) {
  if (s == "linear") return DecayType::kLinear;
  if (s == "constant") return DecayType::kConstant;
  if (s == "rsqrt") return DecayType::kRsqrt;
  throw ConfigError("unknown decay type '" + s + "' (linear, constant, rsqrt)");
}

struct ScheduleConfig {
  double base_lr = 8e-4;
  std::int64_t warmup_steps = 0;
  DecayType decay_type = DecayType::kRsqrt;
  double timescale = 10000;       // rsqrt only
  std::int64_t total_steps = 0;   // 0 = open-ended (no cooldown, no endpoint)
  std::int64_t cooldown_steps = 0;

  void validate() const {
    if (base_lr <= 0.0) throw ConfigError("base_lr must be positive");
    if (warmup_steps < 0 || cooldown_steps < 0) throw ConfigError("negative schedule phase");
    const bool finite = total_steps > 0;
    if (!finite && (decay_type == DecayType::kLinear || cooldown_steps > 0))
      throw ConfigError("linear decay and cooldown need total_steps");
    if (finite && warmup_steps + cooldown_steps > total_steps)
      throw ConfigError("warmup + cooldown exceed total_steps");
    if (finite && decay_type == DecayType::kLinear && total_steps == warmup_steps)
      throw ConfigError("linear decay needs total_steps > warmup_steps");
    if (decay_type == DecayType::kRsqrt && timescale <= 0.0)
      throw ConfigError("rsqrt schedule needs a positive timescale");
  }
};

inline double lr_at(const ScheduleConfig& s, std::int64_t step) {
  s.validate();
  if (step < 0) throw ValueError("schedule step must be >= 0");
  const bool finite = s.total_steps > 0;
  if (finite && step > s.total_steps) return 0.0;
  double factor = 1.0;
  if (s.warmup_steps > 0)
    factor *= std::min(1.0, static_cast<double>(step) / static_cast<double>(s.warmup_steps));
  switch (s.decay_type) {
    case DecayType::kLinear:
      factor *= static_cast<double>(s.total_steps - step) /
                static_cast<double>(s.total_steps - s.warmup_steps);
      break;
    case DecayType::kConstant:
      break;
    case DecayType::kRsqrt:
      factor *= std::sqrt(s.timescale / std::max(static_cast<double>(step), s.timescale));
      break;
  }
  if (finite && s.cooldown_steps > 0) {
    const std::int64_t cooldown_start = s.total_steps - s.cooldown_steps;
    if (step > cooldown_start)
      factor *= static_cast<double>(s.total_steps - step) /
                static_cast<double>(s.cooldown_steps);
  }
  return s.base_lr * factor;
}

// ---------------------------------------------------------------------------
// Global-norm gradient clipping and Polyak averaging
// ---------------------------------------------------------------------------

struct ClipResult {
  double norm = 0.0;   // joint L2 norm before clipping
  double scale = 1.0;  // factor that was applied
};

inline ClipResult clip_global_norm(std::vector<Tensor*> grads, double max_norm) {
  if (max_norm <= 0.0) throw ConfigError("max_norm must be positive");
  double sq = 0.0;
  for (const Tensor* g : grads)
    for (double v : g->data) sq += v * v;
  ClipResult r;
  r.norm = std::sqrt(sq);
  if (r.norm > max_norm) {
    r.scale = max_norm / r.norm;
    for (Tensor* g : grads)
      for (auto& v : g->data) v *= r.scale;
  }
  return r;
}

inline void polyak_update(Tensor& avg, const Tensor& params, double decay) {
  if (decay < 0.0 || decay >= 1.0) throw ConfigError("polyak decay must be in [0, 1)");
  if (!avg.same_shape(params))
    throw ShapeError("polyak_update shape mismatch: " + Tensor::shape_str(avg.shape) + " vs " +
                     Tensor::shape_str(params.shape));
  for (std::size_t i = 0; i < avg.data.size(); ++i)
    avg.data[i] = decay * avg.data[i] + (1.0 - decay) * params.data[i];
}

}  // namespace vtsk
