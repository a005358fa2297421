// SPDX-License-Identifier: Apache-2.0
//
// Analytic cost model: parameter counts, FLOPs (as 2x multiply-accumulates,
// the convention that reproduces the published per-shape numbers), TPU-style
// token padding to multiples of 128, optimizer memory regimes, and the
// "Shapefinder" grid walk over candidate architectures.

#pragma once

#include <cstdint>
#include <map>
#include <string>
#include <vector>

#include "vtsk/common.hpp"
#include "vtsk/optim.hpp"
#include "vtsk/vit.hpp"

namespace vtsk {

inline constexpr std::int64_t kTokenPadMultiple = 128;

struct TokenCount {
  std::int64_t tokens = 0;
  std::int64_t padded = 0;
};

inline TokenCount tokens_and_padding(const ShapeConfig& shape, std::int64_t res,
                                     bool with_class_token) {
  if (res < 1 || res % shape.patch_size != 0)
    throw ShapeError("resolution " + std::to_string(res) + " not divisible by patch " +
                     std::to_string(shape.patch_size));
  const std::int64_t g = res / shape.patch_size;
  TokenCount tc;
  tc.tokens = g * g + (with_class_token ? 1 : 0);
  tc.padded = (tc.tokens + kTokenPadMultiple - 1) / kTokenPadMultiple * kTokenPadMultiple;
  return tc;
}

struct ParamCount {
  std::int64_t body = 0;
  std::int64_t head = 0;  // MAP head (if any) plus classifier, reported separately
};

/// Closed-form parameter count; the instantiated ParamSet must agree exactly
/// (checked against param_layout in the tests).
inline ParamCount count_params(const ShapeConfig& shape) {
  shape.validate();
  const std::int64_t w = shape.width, mlp = shape.mlp_width;
  ParamCount pc;
  pc.body += shape.patch_dim() * w + w;                    // patch embedding
  if (shape.head_type == HeadType::kCls) pc.body += w;     // class token
  pc.body += shape.seq_len() * w;                          // positional table
  const std::int64_t per_block = 3 * (w * w + w)           // qkv
                                 + (w * w + w)             // attention out-proj
                                 + 2 * w * mlp + mlp + w   // mlp
                                 + 4 * w;                  // two layer norms
  pc.body += shape.depth * per_block;
  pc.body += 2 * w;                                        // final norm
  if (shape.head_type == HeadType::kMap) {
    pc.head += w;                       // query
    pc.head += w * w + w;               // q projection
    pc.head += 2 * w * w + 2 * w;       // kv projection
    pc.head += w * w + w;               // out projection
    if (shape.map_mlp) pc.head += 2 * w + 2 * w * mlp + mlp + w;
  }
  pc.head += w * shape.num_classes + shape.num_classes;    // classifier
  return pc;
}

/// Multiply-accumulates for one image at the given resolution. When the
/// resolution is not a multiple of the patch size the grid truncates
/// conv-style (floor(res/patch) per side), which is how the published
/// numbers handle 384^2 with 28 px patches.
inline std::int64_t count_macs(const ShapeConfig& shape, std::int64_t res) {
  shape.validate();
  if (res < shape.patch_size)
    throw ShapeError("resolution " + std::to_string(res) + " below patch size");
  const std::int64_t g = res / shape.patch_size;
  const std::int64_t patch_tokens = g * g;
  const std::int64_t t =
      patch_tokens + (shape.head_type == HeadType::kCls ? 1 : 0);  // encoder sequence length
  const std::int64_t w = shape.width, mlp = shape.mlp_width;
  std::int64_t macs = patch_tokens * shape.patch_dim() * w;  // patch embedding
  macs += shape.depth * (4 * t * w * w      // qkv + out projections
                         + 2 * t * t * w    // attention scores and values
                         + 2 * t * w * mlp  // mlp
                        );
  if (shape.head_type == HeadType::kMap) {
    macs += w * w;          // query projection
    macs += 2 * t * w * w;  // kv projection
    macs += 2 * t * w;      // scores and weighted values
    macs += w * w;          // out projection
    if (shape.map_mlp) macs += 2 * w * mlp;
  }
  macs += w * shape.num_classes;  // classifier
  return macs;
}

/// flops = 2 * macs, exactly.
inline std::int64_t count_flops(const ShapeConfig& shape, std::int64_t res) {
  return 2 * count_macs(shape, res);
}

// ---------------------------------------------------------------------------
// Memory regimes
// ---------------------------------------------------------------------------

struct MemoryModel {
  double bytes_per_param = 4.0;
  double adam_factor = 2.0;           // two extra scalars per parameter
  double adam_hp_factor = 1.5;        // bf16 first moment
  double adafactor_mod_factor = 0.5;  // factored second moment + bf16 first
  double gradient_factor = 1.0;
  double act_bytes_per_unit = 8.0;    // per example * padded token * width * layer
  double budget_bytes = 16.0 * (1ull << 30);

  double optimizer_factor(OptimizerMode mode) const {
    switch (mode) {
      case OptimizerMode::kAdam: return adam_factor;
      case OptimizerMode::kAdamHp: return adam_hp_factor;
      case OptimizerMode::kAdafactorMod: return adafactor_mod_factor;
    }
    throw ValueError("bad optimizer mode");
  }
};

struct MemoryBreakdown {
  double params_bytes = 0;
  double optimizer_bytes = 0;
  double grad_bytes = 0;        // transient backward buffer, reported but not
                                // held across the update
  double activation_bytes = 0;
  bool fits = false;

  double resident_bytes() const { return params_bytes + optimizer_bytes + activation_bytes; }
  double total_bytes() const { return resident_bytes() + grad_bytes; }
};

inline MemoryBreakdown memory_breakdown(std::int64_t param_count, std::int64_t padded_tokens,
                                        std::int64_t width, std::int64_t depth,
                                        OptimizerMode mode, std::int64_t batch,
                                        const MemoryModel& model = {}) {
  if (batch < 1) throw ValueError("batch must be >= 1");
  MemoryBreakdown mb;
  mb.params_bytes = static_cast<double>(param_count) * model.bytes_per_param;
  mb.optimizer_bytes = mb.params_bytes * model.optimizer_factor(mode);
  mb.grad_bytes = mb.params_bytes * model.gradient_factor;
  mb.activation_bytes = static_cast<double>(batch) * static_cast<double>(padded_tokens) *
                        static_cast<double>(width) * static_cast<double>(depth) *
                        model.act_bytes_per_unit;
  mb.fits = mb.resident_bytes() <= model.budget_bytes;
  return mb;
}

inline MemoryBreakdown memory_report(const ShapeConfig& shape, OptimizerMode mode,
                                     std::int64_t batch, const MemoryModel& model = {}) {
  const ParamCount pc = count_params(shape);
  const TokenCount tc =
      tokens_and_padding(shape, shape.image_res, shape.head_type == HeadType::kCls);
  return memory_breakdown(pc.body + pc.head, tc.padded, shape.width, shape.depth, mode, batch,
                          model);
}

// ---------------------------------------------------------------------------
// Full cost report (what the `cost` CLI prints)
// ---------------------------------------------------------------------------

struct CostReport {
  ShapeConfig shape;
  std::int64_t body_params = 0;
  std::int64_t head_params = 0;
  std::int64_t macs = 0;
  std::int64_t flops = 0;
  std::int64_t tokens = 0;
  std::int64_t padded_tokens = 0;
  std::map<std::string, MemoryBreakdown> memory;  // keyed by optimizer mode name
};

inline CostReport cost_report(const ShapeConfig& shape, std::int64_t batch,
                              const MemoryModel& model = {}) {
  CostReport r;
  r.shape = shape;
  const ParamCount pc = count_params(shape);
  r.body_params = pc.body;
  r.head_params = pc.head;
  r.macs = count_macs(shape, shape.image_res);
  r.flops = 2 * r.macs;
  const TokenCount tc =
      tokens_and_padding(shape, shape.image_res, shape.head_type == HeadType::kCls);
  r.tokens = tc.tokens;
  r.padded_tokens = tc.padded;
  for (OptimizerMode mode :
       {OptimizerMode::kAdam, OptimizerMode::kAdamHp, OptimizerMode::kAdafactorMod})
    r.memory[to_string(mode)] =
        memory_breakdown(pc.body + pc.head, tc.padded, shape.width, shape.depth, mode, batch,
                         model);
  return r;
}

// ---------------------------------------------------------------------------
// Shapefinder: feasibility of every grid combination per optimizer regime,
// with an analytic 1/FLOPs speed proxy.
// ---------------------------------------------------------------------------

struct GridSpec {
  std::vector<std::int64_t> widths;
  std::vector<std::int64_t> depths;
  std::vector<std::int64_t> heads;
  std::vector<std::int64_t> mlp_widths;
  std::int64_t patch_size = 14;

  void validate() const {
    if (widths.empty() || depths.empty() || heads.empty() || mlp_widths.empty())
      throw ConfigError("shapefinder grid lists must be nonempty");
  }
};

struct ShapePoint {
  ShapeConfig shape;
  std::int64_t params = 0;  // body + head
  std::int64_t flops = 0;
  double speed_proxy = 0.0;  // 1 / flops
  std::map<std::string, bool> fits;
};

/// Walks the grid in (depth, width, mlp, heads) order; combinations where the
/// width is not divisible by the head count are skipped.
inline std::vector<ShapePoint> shapefind(const GridSpec& grid, std::int64_t res,
                                         std::int64_t batch,
                                         const std::vector<OptimizerMode>& modes,
                                         const MemoryModel& model = {}) {
  grid.validate();
  auto sorted = [](std::vector<std::int64_t> v) {
    std::sort(v.begin(), v.end());
    return v;
  };
  const auto depths = sorted(grid.depths);
  const auto widths = sorted(grid.widths);
  const auto mlps = sorted(grid.mlp_widths);
  const auto heads = sorted(grid.heads);

  std::vector<ShapePoint> out;
  for (auto depth : depths)
    for (auto width : widths)
      for (auto mlp : mlps)
        for (auto h : heads) {
          if (width % h != 0) continue;
          ShapeConfig s;
          s.width = width;
          s.depth = depth;
          s.mlp_width = mlp;
          s.heads = h;
          s.patch_size = grid.patch_size;
          s.image_res = res;
          s.head_type = HeadType::kMap;
          ShapePoint p;
          p.shape = s;
          const ParamCount pc = count_params(s);
          p.params = pc.body + pc.head;
          p.flops = count_flops(s, res);
          p.speed_proxy = 1.0 / static_cast<double>(p.flops);
          for (OptimizerMode mode : modes)
            p.fits[to_string(mode)] = memory_report(s, mode, batch, model).fits;
          out.push_back(std::move(p));
        }
  return out;
}

}  // namespace vtsk
