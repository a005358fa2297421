// SPDX-License-Identifier: Apache-2.0
//
// Desk-scale training harness: synthetic quadrant-template classification
// data, the training loop wiring model + clipping + optimizer + schedule +
// decoupled weight decay (+ optional Polyak averaging), feature extraction
// for the probe, and an IDX loader for users with real small image sets.

#pragma once

#include <cmath>
#include <cstdint>
#include <fstream>
#include <string>
#include <vector>

#include "vtsk/common.hpp"
#include "vtsk/fewshot.hpp"
#include "vtsk/optim.hpp"
#include "vtsk/tensor.hpp"
#include "vtsk/vit.hpp"

namespace vtsk {

// ---------------------------------------------------------------------------
// Synthetic task: each class is a deterministic 2x2 grid of quadrant
// intensities (+/- amplitude from the class index bit pattern) plus Gaussian
// pixel noise. Bayes-separable whenever sigma is small against the gap.
// ---------------------------------------------------------------------------

struct SyntheticSpec {
  std::int64_t res = 16;
  int classes = 4;
  std::int64_t per_class = 128;
  double sigma = 0.05;
  double amplitude = 1.0;
  std::uint64_t seed = 0;

  void validate() const {
    if (classes < 2) throw ConfigError("synthetic task needs >= 2 classes");
    if (classes > 16) throw ConfigError("quadrant templates support at most 16 classes");
    if (sigma < 0.0) throw ConfigError("sigma must be >= 0");
    if (res < 2 || res % 2 != 0) throw ConfigError("res must be even and >= 2");
    if (per_class < 1) throw ConfigError("per_class must be >= 1");
  }
};

/// The noise-free class template, [res x res x 1].
inline Tensor synthetic_template(const SyntheticSpec& spec, int class_index) {
  spec.validate();
  if (class_index < 0 || class_index >= spec.classes)
    throw ValueError("class index out of range");
  Tensor img = Tensor::zeros({spec.res, spec.res, 1});
  const std::int64_t half = spec.res / 2;
  for (std::int64_t y = 0; y < spec.res; ++y)
    for (std::int64_t x = 0; x < spec.res; ++x) {
      const int quadrant = static_cast<int>((y / half) * 2 + (x / half));
      const bool bit = (class_index >> quadrant) & 1;
      img.data[y * spec.res + x] = bit ? spec.amplitude : -spec.amplitude;
    }
  return img;
}

struct LabeledImages {
  Tensor images;  // [n, res, res, 1]
  std::vector<int> labels;
};

inline LabeledImages gen_synthetic(const SyntheticSpec& spec) {
  spec.validate();
  Rng rng(spec.seed);
  const std::int64_t n = spec.per_class * spec.classes;
  LabeledImages out;
  out.images = Tensor::zeros({n, spec.res, spec.res, 1});
  out.labels.reserve(n);
  const std::int64_t pixels = spec.res * spec.res;
  std::int64_t row = 0;
  for (int cls = 0; cls < spec.classes; ++cls) {
    const Tensor tmpl = synthetic_template(spec, cls);
    for (std::int64_t i = 0; i < spec.per_class; ++i, ++row) {
      for (std::int64_t p = 0; p < pixels; ++p)
        out.images.data[row * pixels + p] = tmpl.data[p] + spec.sigma * rng.normal();
      out.labels.push_back(cls);
    }
  }
  return out;
}

// ---------------------------------------------------------------------------
// Training
// ---------------------------------------------------------------------------

struct TrainConfig {
  ShapeConfig shape;
  OptimizerMode optimizer = OptimizerMode::kAdafactorMod;
  ScheduleConfig schedule;
  OptimConfig optim;
  double base_wd = 0.03 * 8e-4;  // wd = 0.03 * lr, folded per step
  std::vector<WeightDecayRule> wd_rules = {{".*head/kernel", 100.0}, {".*/kernel", 1.0}};
  std::int64_t batch = 16;
  std::int64_t total_steps = 2000;
  std::uint64_t seed = 0;
  double polyak_decay = -1.0;  // < 0 disables

  void validate() const {
    shape.validate();
    if (batch < 1) throw ConfigError("batch must be >= 1");
    if (total_steps < 0) throw ConfigError("total_steps must be >= 0");
    if (polyak_decay >= 1.0) throw ConfigError("polyak decay must be < 1");
  }
};

struct TrainLogRow {
  std::int64_t step = 0;
  double loss = 0.0;
  double lr = 0.0;
  double grad_norm = 0.0;  // joint norm before clipping
};

struct TrainLog {
  std::vector<TrainLogRow> rows;

  void write_csv(const std::string& path) const {
    std::ofstream f(path, std::ios::binary);
    if (!f) throw DataError("cannot write train log: " + path);
    f << "step,loss,lr,grad_norm\n";
    char buf[160];
    for (const auto& r : rows) {
      std::snprintf(buf, sizeof(buf), "%lld,%.17g,%.17g,%.17g\n",
                    static_cast<long long>(r.step), r.loss, r.lr, r.grad_norm);
      f << buf;
    }
  }
};

struct TrainResult {
  ParamSet params;
  ParamSet polyak;  // empty unless polyak_decay was set
  TrainLog log;
};

namespace detail {

inline Tensor gather_batch(const Tensor& images, const std::vector<std::int64_t>& idx) {
  const std::int64_t per = images.numel() / images.shape[0];
  std::vector<std::int64_t> shape = images.shape;
  shape[0] = static_cast<std::int64_t>(idx.size());
  Tensor out = Tensor::zeros(shape);
  for (std::size_t i = 0; i < idx.size(); ++i)
    std::copy(images.data.begin() + idx[i] * per, images.data.begin() + (idx[i] + 1) * per,
              out.data.begin() + static_cast<std::int64_t>(i) * per);
  return out;
}

}  // namespace detail

/// One deterministic training run. Per step: seeded-shuffle batch, forward
/// softmax cross-entropy, backward, global-norm clip, optimizer step at
/// lr_at(step+1), decoupled weight decay, optional Polyak update.
/// A non-finite loss aborts with the last good step in the message.
inline TrainResult train(const TrainConfig& config, const LabeledImages& data) {
  config.validate();
  const std::int64_t n = data.images.shape[0];
  if (static_cast<std::int64_t>(data.labels.size()) != n)
    throw ShapeError("label count does not match image count");
  for (int y : data.labels)
    if (y < 0 || y >= static_cast<int>(config.shape.num_classes))
      throw ValueError("label out of range for the configured class count");

  TrainResult result;
  result.params = init_params(config.shape, config.seed);
  const bool use_polyak = config.polyak_decay >= 0.0;
  if (use_polyak) result.polyak = result.params;

  // per-parameter optimizer state
  std::vector<AdamState> adam_states;
  std::vector<AdafactorState> factored_states;
  const bool adafactor = config.optimizer == OptimizerMode::kAdafactorMod;
  for (const auto& [name, tensor] : result.params) {
    if (adafactor) {
      factored_states.push_back(AdafactorState::init(tensor.shape));
    } else {
      adam_states.push_back(AdamState::init(
          tensor.shape, config.optimizer == OptimizerMode::kAdamHp ? MomentumStorage::kBf16
                                                                   : MomentumStorage::kFull64));
    }
  }

  Rng shuffle_rng(config.seed + 0x5157ull);
  std::vector<std::int64_t> order(n);
  std::iota(order.begin(), order.end(), 0);
  shuffle_rng.shuffle(order);
  std::size_t cursor = 0;

  for (std::int64_t step = 0; step < config.total_steps; ++step) {
    std::vector<std::int64_t> batch_idx;
    std::vector<int> batch_labels;
    for (std::int64_t i = 0; i < config.batch; ++i) {
      if (cursor == order.size()) {
        shuffle_rng.shuffle(order);
        cursor = 0;
      }
      batch_idx.push_back(order[cursor]);
      batch_labels.push_back(data.labels[order[cursor]]);
      ++cursor;
    }
    Tensor batch = detail::gather_batch(data.images, batch_idx);

    Tape tape;
    BoundParams bound(tape, result.params, /*requires_grad=*/true);
    ForwardResult fr = forward(tape, bound, batch, config.shape);
    Var loss = tape.softmax_cross_entropy(fr.logits, batch_labels);
    const double loss_value = tape.value(loss).data[0];
    if (!std::isfinite(loss_value))
      throw ValueError("training diverged (non-finite loss) at step " + std::to_string(step) +
                       "; last good step " + std::to_string(step - 1));
    Gradients grads = tape.backward(loss);

    // grads in parameter order; parameters the loss never saw count as zero
    std::vector<Tensor> grad_tensors;
    grad_tensors.reserve(result.params.size());
    for (const auto& [name, var] : bound.entries()) {
      if (grads.has(var))
        grad_tensors.push_back(grads.at(var));
      else
        grad_tensors.push_back(Tensor::zeros(tape.value(var).shape));
    }
    std::vector<Tensor*> grad_ptrs;
    for (auto& g : grad_tensors) grad_ptrs.push_back(&g);
    const ClipResult clip = clip_global_norm(grad_ptrs, config.optim.grad_clip_norm);

    const double lr = lr_at(config.schedule, step + 1);
    std::size_t i = 0;
    for (auto& [name, tensor] : result.params) {
      if (adafactor)
        adafactor_step(tensor, grad_tensors[i], factored_states[i], lr, config.optim);
      else
        adam_step(tensor, grad_tensors[i], adam_states[i], lr, config.optim);
      ++i;
    }
    decay_params(result.params, config.wd_rules, config.base_wd);
    if (use_polyak) {
      auto avg_it = result.polyak.begin();
      for (const auto& [name, tensor] : result.params) {
        polyak_update(avg_it->second, tensor, config.polyak_decay);
        ++avg_it;
      }
    }
    result.log.rows.push_back({step, loss_value, lr, clip.norm});
  }
  return result;
}

/// Mean argmax train accuracy of a parameter set on labeled data.
inline double evaluate_accuracy(const ParamSet& params, const LabeledImages& data,
                                const ShapeConfig& shape, std::int64_t eval_batch = 64) {
  const std::int64_t n = data.images.shape[0];
  std::int64_t correct = 0;
  for (std::int64_t start = 0; start < n; start += eval_batch) {
    std::vector<std::int64_t> idx;
    for (std::int64_t i = start; i < std::min(n, start + eval_batch); ++i) idx.push_back(i);
    Tensor batch = detail::gather_batch(data.images, idx);
    auto [logits, features] = forward_values(params, batch, shape);
    (void)features;
    const std::int64_t classes = shape.num_classes;
    for (std::size_t r = 0; r < idx.size(); ++r) {
      int best = 0;
      for (std::int64_t j = 1; j < classes; ++j)
        if (logits.data[r * classes + j] > logits.data[r * classes + best])
          best = static_cast<int>(j);
      if (best == data.labels[idx[r]]) ++correct;
    }
  }
  return static_cast<double>(correct) / static_cast<double>(n);
}

/// Frozen post-pooling features (the forward() feature output) for a probe.
inline FeatureSet extract_features(const ParamSet& params, const LabeledImages& data,
                                   const ShapeConfig& shape, std::int64_t eval_batch = 64) {
  const std::int64_t n = data.images.shape[0];
  FeatureSet out;
  out.class_count = static_cast<int>(shape.num_classes);
  out.X = Tensor::zeros({n, shape.width});
  out.y = data.labels;
  for (std::int64_t start = 0; start < n; start += eval_batch) {
    std::vector<std::int64_t> idx;
    for (std::int64_t i = start; i < std::min(n, start + eval_batch); ++i) idx.push_back(i);
    Tensor batch = detail::gather_batch(data.images, idx);
    auto [logits, features] = forward_values(params, batch, shape);
    (void)logits;
    std::copy(features.data.begin(), features.data.end(),
              out.X.data.begin() + start * shape.width);
  }
  return out;
}

/// Raw pixels as a FeatureSet, the probe baseline.
inline FeatureSet pixel_features(const LabeledImages& data, int class_count) {
  FeatureSet out;
  out.class_count = class_count;
  const std::int64_t n = data.images.shape[0];
  out.X = Tensor({n, data.images.numel() / n}, data.images.data);
  out.y = data.labels;
  return out;
}

// ---------------------------------------------------------------------------
// IDX image/label files (big-endian magics 0x00000803 / 0x00000801)
// ---------------------------------------------------------------------------

namespace detail {

inline std::uint32_t read_be32(std::ifstream& f, const std::string& path) {
  unsigned char b[4];
  f.read(reinterpret_cast<char*>(b), 4);
  if (!f) throw DataError("truncated IDX file: " + path);
  return (std::uint32_t(b[0]) << 24) | (std::uint32_t(b[1]) << 16) | (std::uint32_t(b[2]) << 8) |
         std::uint32_t(b[3]);
}

}  // namespace detail

/// Loads square u8 images and labels; pixels are scaled to [0, 1].
inline LabeledImages load_idx(const std::string& images_path, const std::string& labels_path) {
  std::ifstream fi(images_path, std::ios::binary);
  if (!fi) throw DataError("cannot open IDX images: " + images_path);
  if (detail::read_be32(fi, images_path) != 0x00000803u)
    throw DataError("bad IDX image magic in " + images_path);
  const std::uint32_t n = detail::read_be32(fi, images_path);
  const std::uint32_t rows = detail::read_be32(fi, images_path);
  const std::uint32_t cols = detail::read_be32(fi, images_path);
  if (rows != cols) throw DataError("IDX loader expects square images");
  LabeledImages out;
  out.images = Tensor::zeros({n, rows, cols, 1});
  std::vector<unsigned char> buf(static_cast<std::size_t>(n) * rows * cols);
  fi.read(reinterpret_cast<char*>(buf.data()), static_cast<std::streamsize>(buf.size()));
  if (!fi) throw DataError("truncated IDX images: " + images_path);
  for (std::size_t i = 0; i < buf.size(); ++i)
    out.images.data[i] = static_cast<double>(buf[i]) / 255.0;

  std::ifstream fl(labels_path, std::ios::binary);
  if (!fl) throw DataError("cannot open IDX labels: " + labels_path);
  if (detail::read_be32(fl, labels_path) != 0x00000801u)
    throw DataError("bad IDX label magic in " + labels_path);
  const std::uint32_t nl = detail::read_be32(fl, labels_path);
  if (nl != n) throw DataError("IDX image/label counts disagree");
  std::vector<unsigned char> lbuf(nl);
  fl.read(reinterpret_cast<char*>(lbuf.data()), nl);
  if (!fl) throw DataError("truncated IDX labels: " + labels_path);
  out.labels.assign(lbuf.begin(), lbuf.end());
  return out;
}

}  // namespace vtsk
