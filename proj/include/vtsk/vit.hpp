// SPDX-License-Identifier: Apache-2.0
//
// Toy-scale pre-LN Vision Transformer with selectable pooling head: a learned
// [class] token, global average pooling (GAP), or multihead attention pooling
// (MAP). Parameters carry hierarchical names ("block3/attn/qkv/kernel",
// "head/kernel", ...) so pattern-based weight-decay rules can target them.

#pragma once

#include <cstdint>
#include <fstream>
#include <string>
#include <unordered_map>
#include <utility>
#include <vector>

#include <json.hpp>

#include "vtsk/common.hpp"
#include "vtsk/tensor.hpp"

namespace vtsk {

enum class HeadType { kCls, kGap, kMap };

inline std::string to_string(HeadType h) {
  switch (h) {
    case HeadType::kCls: return "cls";
    case HeadType::kGap: return "gap";
    case HeadType::kMap: return "map";
  }
  throw ValueError("bad head type");
}

inline HeadType head_type_from(const std::string& s) {
  if (s == "cls") return HeadType::kCls;
  if (s == "gap") return HeadType::kGap;
  if (s == "map") return HeadType::kMap;
  throw ConfigError("unknown head type '" + s + "' (cls, gap, map)");
}

struct ShapeConfig {
  std::int64_t width = 0;
  std::int64_t depth = 0;
  std::int64_t mlp_width = 0;
  std::int64_t heads = 0;
  std::int64_t patch_size = 0;
  std::int64_t image_res = 224;
  std::int64_t channels = 3;
  std::int64_t num_classes = 1000;
  HeadType head_type = HeadType::kMap;
  bool map_mlp = false;  // optional MLP sub-block inside the MAP head

  void validate() const {
    if (width < 1 || depth < 0 || mlp_width < 1 || heads < 1 || patch_size < 1 ||
        image_res < 1 || channels < 1 || num_classes < 1)
      throw ConfigError("shape fields must be positive");
    if (width % heads != 0)
      throw ConfigError("width " + std::to_string(width) + " not divisible by heads " +
                        std::to_string(heads));
    if (image_res % patch_size != 0)
      throw ShapeError("image_res " + std::to_string(image_res) + " not divisible by patch " +
                       std::to_string(patch_size));
  }

  std::int64_t grid() const { return image_res / patch_size; }
  std::int64_t tokens() const { return grid() * grid(); }
  std::int64_t seq_len() const { return tokens() + (head_type == HeadType::kCls ? 1 : 0); }
  std::int64_t patch_dim() const { return patch_size * patch_size * channels; }
};

// ---------------------------------------------------------------------------
// ParamSet: insertion-ordered named tensors. Order fixes initialization,
// checkpoint layout and optimizer iteration.
// ---------------------------------------------------------------------------

class ParamSet {
 public:
  using Entry = std::pair<std::string, Tensor>;

  void add(const std::string& name, Tensor t) {
    if (index_.count(name)) throw ConfigError("duplicate parameter name: " + name);
    index_[name] = entries_.size();
    entries_.emplace_back(name, std::move(t));
  }

  bool has(const std::string& name) const { return index_.count(name) > 0; }

  Tensor& at(const std::string& name) {
    auto it = index_.find(name);
    if (it == index_.end()) throw ValueError("no parameter named: " + name);
    return entries_[it->second].second;
  }

  const Tensor& at(const std::string& name) const {
    auto it = index_.find(name);
    if (it == index_.end()) throw ValueError("no parameter named: " + name);
    return entries_[it->second].second;
  }

  std::size_t size() const { return entries_.size(); }
  auto begin() { return entries_.begin(); }
  auto end() { return entries_.end(); }
  auto begin() const { return entries_.begin(); }
  auto end() const { return entries_.end(); }

 private:
  std::vector<Entry> entries_;
  std::unordered_map<std::string, std::size_t> index_;
};

/// Head-scope parameters are the classifier and the MAP head; everything else
/// (embedding, positional table, encoder blocks, final norm) is "body".
inline bool is_head_param(const std::string& name) {
  return name.rfind("head/", 0) == 0 || name.rfind("map/", 0) == 0;
}

struct ParamSpec {
  std::string name;
  std::vector<std::int64_t> dims;
};

/// The full parameter layout, without allocating anything. Counting at
/// billion-parameter scale works off this.
inline std::vector<ParamSpec> param_layout(const ShapeConfig& shape) {
  shape.validate();
  const auto w = shape.width, mlp = shape.mlp_width;
  std::vector<ParamSpec> out;
  out.push_back({"embed/kernel", {shape.patch_dim(), w}});
  out.push_back({"embed/bias", {w}});
  if (shape.head_type == HeadType::kCls) out.push_back({"cls_token", {1, w}});
  out.push_back({"pos_embedding", {shape.seq_len(), w}});
  for (std::int64_t i = 0; i < shape.depth; ++i) {
    const std::string b = "block" + std::to_string(i) + "/";
    out.push_back({b + "ln1/gain", {w}});
    out.push_back({b + "ln1/bias", {w}});
    out.push_back({b + "attn/qkv/kernel", {w, 3 * w}});
    out.push_back({b + "attn/qkv/bias", {3 * w}});
    out.push_back({b + "attn/out/kernel", {w, w}});
    out.push_back({b + "attn/out/bias", {w}});
    out.push_back({b + "ln2/gain", {w}});
    out.push_back({b + "ln2/bias", {w}});
    out.push_back({b + "mlp/fc1/kernel", {w, mlp}});
    out.push_back({b + "mlp/fc1/bias", {mlp}});
    out.push_back({b + "mlp/fc2/kernel", {mlp, w}});
    out.push_back({b + "mlp/fc2/bias", {w}});
  }
  out.push_back({"final_norm/gain", {w}});
  out.push_back({"final_norm/bias", {w}});
  if (shape.head_type == HeadType::kMap) {
    out.push_back({"map/query", {1, w}});
    out.push_back({"map/attn/q/kernel", {w, w}});
    out.push_back({"map/attn/q/bias", {w}});
    out.push_back({"map/attn/kv/kernel", {w, 2 * w}});
    out.push_back({"map/attn/kv/bias", {2 * w}});
    out.push_back({"map/attn/out/kernel", {w, w}});
    out.push_back({"map/attn/out/bias", {w}});
    if (shape.map_mlp) {
      out.push_back({"map/ln/gain", {w}});
      out.push_back({"map/ln/bias", {w}});
      out.push_back({"map/mlp/fc1/kernel", {w, mlp}});
      out.push_back({"map/mlp/fc1/bias", {mlp}});
      out.push_back({"map/mlp/fc2/kernel", {mlp, w}});
      out.push_back({"map/mlp/fc2/bias", {w}});
    }
  }
  out.push_back({"head/kernel", {w, shape.num_classes}});
  out.push_back({"head/bias", {shape.num_classes}});
  return out;
}

/// Deterministic per seed. Linear kernels ~ N(0, 1/fan_in); biases, the
/// positional table, the class token and the MAP query ~ N(0, 0.02^2); norm
/// gains start at one; the classifier kernel and bias start at zero so the
/// initial loss is the uniform-prediction loss.
inline ParamSet init_params(const ShapeConfig& shape, std::uint64_t seed) {
  Rng rng(seed);
  ParamSet params;
  for (const auto& spec : param_layout(shape)) {
    Tensor t = Tensor::zeros(spec.dims);
    const std::string& n = spec.name;
    const bool is_kernel = n.size() >= 7 && n.compare(n.size() - 7, 7, "/kernel") == 0;
    const bool is_gain = n.size() >= 5 && n.compare(n.size() - 5, 5, "/gain") == 0;
    if (n == "head/kernel" || n == "head/bias") {
      // stays zero
    } else if (is_kernel) {
      const double std_dev = 1.0 / std::sqrt(static_cast<double>(spec.dims[0]));
      for (auto& v : t.data) v = std_dev * rng.normal();
    } else if (is_gain) {
      for (auto& v : t.data) v = 1.0;
    } else {
      for (auto& v : t.data) v = 0.02 * rng.normal();
    }
    params.add(spec.name, std::move(t));
  }
  return params;
}

/// Rearranges [b, res, res, c] images into non-overlapping raster-order
/// patches: [b, tokens, patch*patch*c], pixels row-major within a patch,
/// channel fastest.
inline Tensor patchify(const Tensor& images, std::int64_t patch_size) {
  if (images.rank() != 4)
    throw ShapeError("patchify wants [b x res x res x c] images, got " +
                     Tensor::shape_str(images.shape));
  const auto b = images.shape[0], res = images.shape[1], cols = images.shape[2],
             c = images.shape[3];
  if (res != cols)
    throw ShapeError("patchify wants square images, got " + Tensor::shape_str(images.shape));
  if (res % patch_size != 0)
    throw ShapeError("resolution " + std::to_string(res) + " not divisible by patch size " +
                     std::to_string(patch_size));
  const std::int64_t g = res / patch_size;
  const std::int64_t t = g * g;
  const std::int64_t d = patch_size * patch_size * c;
  Tensor out = Tensor::zeros({b, t, d});
  for (std::int64_t img = 0; img < b; ++img)
    for (std::int64_t gy = 0; gy < g; ++gy)
      for (std::int64_t gx = 0; gx < g; ++gx) {
        const std::int64_t token = gy * g + gx;
        for (std::int64_t py = 0; py < patch_size; ++py)
          for (std::int64_t px = 0; px < patch_size; ++px)
            for (std::int64_t ch = 0; ch < c; ++ch) {
              const std::int64_t src =
                  ((img * res + gy * patch_size + py) * res + gx * patch_size + px) * c + ch;
              const std::int64_t dst =
                  (img * t + token) * d + (py * patch_size + px) * c + ch;
              out.data[dst] = images.data[src];
            }
      }
  return out;
}

// ---------------------------------------------------------------------------
// Forward pass
// ---------------------------------------------------------------------------

inline constexpr double kLayerNormEps = 1e-6;

/// Tape handles for a ParamSet, in layout order.
class BoundParams {
 public:
  BoundParams(Tape& tape, const ParamSet& params, bool requires_grad) {
    for (const auto& [name, tensor] : params) {
      Tensor t = tensor;
      t.requires_grad = requires_grad;
      index_[name] = entries_.size();
      entries_.emplace_back(name, tape.leaf(std::move(t)));
    }
  }

  Var at(const std::string& name) const {
    auto it = index_.find(name);
    if (it == index_.end()) throw ValueError("no bound parameter named: " + name);
    return entries_[it->second].second;
  }

  const std::vector<std::pair<std::string, Var>>& entries() const { return entries_; }

 private:
  std::vector<std::pair<std::string, Var>> entries_;
  std::unordered_map<std::string, std::size_t> index_;
};

namespace detail {

inline Var dense(Tape& t, Var x, const BoundParams& p, const std::string& prefix) {
  return t.add_bias(t.matmul(x, p.at(prefix + "/kernel")), p.at(prefix + "/bias"));
}

inline Var block_attention(Tape& t, Var x, const BoundParams& p, const std::string& b,
                           const ShapeConfig& shape) {
  const auto batch = t.value(x).shape[0];
  const auto seq = t.value(x).shape[1];
  const auto w = shape.width, h = shape.heads, dh = shape.width / shape.heads;
  Var qkv = dense(t, x, p, b + "attn/qkv");
  auto split_heads = [&](Var v) {
    return t.permute(t.reshape(v, {batch, seq, h, dh}), {0, 2, 1, 3});  // [b,h,t,dh]
  };
  Var q = split_heads(t.slice(qkv, 2, 0, w));
  Var k = split_heads(t.slice(qkv, 2, w, w));
  Var v = split_heads(t.slice(qkv, 2, 2 * w, w));
  Var scores = t.scale(t.matmul(q, t.transpose(k)), 1.0 / std::sqrt(static_cast<double>(dh)));
  Var probs = t.softmax(scores, 3);
  Var ctx = t.matmul(probs, v);                                   // [b,h,t,dh]
  Var merged = t.reshape(t.permute(ctx, {0, 2, 1, 3}), {batch, seq, w});
  return dense(t, merged, p, b + "attn/out");
}

inline Var mlp_block(Tape& t, Var x, const BoundParams& p, const std::string& prefix) {
  return dense(t, t.gelu(dense(t, x, p, prefix + "/fc1")), p, prefix + "/fc2");
}

}  // namespace detail

/// One learned query attends over all tokens with standard multihead
/// attention (1/sqrt(width/heads) logit scaling) followed by an output
/// projection. No positional input, so the result is permutation-invariant
/// over tokens.
inline Var map_pool(Tape& t, Var tokens, const BoundParams& p, const ShapeConfig& shape) {
  const auto batch = t.value(tokens).shape[0];
  const auto seq = t.value(tokens).shape[1];
  const auto w = shape.width, h = shape.heads, dh = shape.width / shape.heads;
  Var kv = detail::dense(t, tokens, p, "map/attn/kv");
  auto split_heads = [&](Var v) {
    return t.permute(t.reshape(v, {batch, seq, h, dh}), {0, 2, 1, 3});
  };
  Var k = split_heads(t.slice(kv, 2, 0, w));
  Var v = split_heads(t.slice(kv, 2, w, w));
  Var q = detail::dense(t, p.at("map/query"), p, "map/attn/q");  // [1, w]
  Var q_heads = t.reshape(t.tile_batch(t.reshape(q, {h, dh}), batch), {batch, h, dh, 1});
  Var scores =
      t.scale(t.matmul(k, q_heads), 1.0 / std::sqrt(static_cast<double>(dh)));  // [b,h,t,1]
  Var probs = t.softmax(scores, 2);
  Var ctx = t.matmul(t.transpose(probs), v);  // [b,h,1,dh]
  Var pooled = detail::dense(t, t.reshape(ctx, {batch, w}), p, "map/attn/out");
  if (shape.map_mlp) {
    Var normed = t.layer_norm(pooled, p.at("map/ln/gain"), p.at("map/ln/bias"), kLayerNormEps);
    pooled = t.add(pooled, detail::mlp_block(t, normed, p, "map/mlp"));
  }
  return pooled;
}

struct ForwardResult {
  Var logits;    // [b, classes]
  Var features;  // [b, width], post final layer norm, pre classifier
};

/// Pre-LN encoder. The final layer norm is applied to token states before
/// pooling (GAP/MAP) or readout (CLS); features feed one linear classifier
/// with no intermediate non-linear projection.
inline ForwardResult forward(Tape& t, const BoundParams& p, const Tensor& images,
                             const ShapeConfig& shape) {
  shape.validate();
  if (images.rank() != 4 || images.shape[1] != shape.image_res ||
      images.shape[2] != shape.image_res || images.shape[3] != shape.channels)
    throw ShapeError("images " + Tensor::shape_str(images.shape) + " do not match shape config " +
                     Tensor::shape_str({-1, shape.image_res, shape.image_res, shape.channels}));
  const std::int64_t batch = images.shape[0];

  Var patches = t.constant(patchify(images, shape.patch_size));
  Var x = detail::dense(t, patches, p, "embed");  // [b, t, w]
  if (shape.head_type == HeadType::kCls) {
    Var cls = t.tile_batch(p.at("cls_token"), batch);  // [b, 1, w]
    x = t.concat({cls, x}, 1);
  }
  x = t.add(x, t.tile_batch(p.at("pos_embedding"), batch));

  for (std::int64_t i = 0; i < shape.depth; ++i) {
    const std::string b = "block" + std::to_string(i) + "/";
    Var h1 = t.layer_norm(x, p.at(b + "ln1/gain"), p.at(b + "ln1/bias"), kLayerNormEps);
    x = t.add(x, detail::block_attention(t, h1, p, b, shape));
    Var h2 = t.layer_norm(x, p.at(b + "ln2/gain"), p.at(b + "ln2/bias"), kLayerNormEps);
    x = t.add(x, detail::mlp_block(t, h2, p, b + "mlp"));
  }

  x = t.layer_norm(x, p.at("final_norm/gain"), p.at("final_norm/bias"), kLayerNormEps);

  Var features{};
  switch (shape.head_type) {
    case HeadType::kCls:
      features = t.reshape(t.slice(x, 1, 0, 1), {batch, shape.width});
      break;
    case HeadType::kGap:
      features = t.mean_axis(x, 1);
      break;
    case HeadType::kMap:
      features = map_pool(t, x, p, shape);
      break;
  }
  Var logits = detail::dense(t, features, p, "head");
  return {logits, features};
}

/// Convenience wrapper: binds params as constants and runs one forward pass.
inline std::pair<Tensor, Tensor> forward_values(const ParamSet& params, const Tensor& images,
                                                const ShapeConfig& shape) {
  Tape tape;
  BoundParams bound(tape, params, /*requires_grad=*/false);
  ForwardResult r = forward(tape, bound, images, shape);
  return {tape.value(r.logits), tape.value(r.features)};
}

// ---------------------------------------------------------------------------
// Checkpoint format, shared with the trainer: magic "VTSK1", a little-endian
// u32 JSON header length, the JSON header (shape config plus ordered
// parameter names and dims), then the parameters as little-endian f32 arrays
// concatenated in header order.
// ---------------------------------------------------------------------------

namespace detail {

inline nlohmann::json shape_to_json(const ShapeConfig& s) {
  return {{"width", s.width},        {"depth", s.depth},
          {"mlp_width", s.mlp_width}, {"heads", s.heads},
          {"patch_size", s.patch_size}, {"image_res", s.image_res},
          {"channels", s.channels},  {"num_classes", s.num_classes},
          {"head_type", to_string(s.head_type)}, {"map_mlp", s.map_mlp}};
}

inline ShapeConfig shape_from_json(const nlohmann::json& j) {
  ShapeConfig s;
  s.width = j.at("width").get<std::int64_t>();
  s.depth = j.at("depth").get<std::int64_t>();
  s.mlp_width = j.at("mlp_width").get<std::int64_t>();
  s.heads = j.at("heads").get<std::int64_t>();
  s.patch_size = j.at("patch_size").get<std::int64_t>();
  s.image_res = j.at("image_res").get<std::int64_t>();
  s.channels = j.at("channels").get<std::int64_t>();
  s.num_classes = j.at("num_classes").get<std::int64_t>();
  s.head_type = head_type_from(j.at("head_type").get<std::string>());
  s.map_mlp = j.value("map_mlp", false);
  return s;
}

}  // namespace detail

inline void save_checkpoint(const std::string& path, const ShapeConfig& shape,
                            const ParamSet& params) {
  nlohmann::json header;
  header["shape"] = detail::shape_to_json(shape);
  header["params"] = nlohmann::json::array();
  for (const auto& [name, tensor] : params)
    header["params"].push_back({{"name", name}, {"dims", tensor.shape}});
  const std::string head = header.dump();

  std::ofstream f(path, std::ios::binary);
  if (!f) throw DataError("cannot write checkpoint: " + path);
  f.write("VTSK1", 5);
  const std::uint32_t len = static_cast<std::uint32_t>(head.size());
  f.write(reinterpret_cast<const char*>(&len), 4);
  f.write(head.data(), static_cast<std::streamsize>(head.size()));
  for (const auto& [name, tensor] : params) {
    for (double v : tensor.data) {
      const float x = static_cast<float>(v);
      f.write(reinterpret_cast<const char*>(&x), 4);
    }
  }
  if (!f) throw DataError("short write on checkpoint: " + path);
}

inline std::pair<ShapeConfig, ParamSet> load_checkpoint(const std::string& path) {
  std::ifstream f(path, std::ios::binary);
  if (!f) throw DataError("cannot open checkpoint: " + path);
  char magic[5];
  f.read(magic, 5);
  if (!f || std::string(magic, 5) != "VTSK1")
    throw DataError("not a VTSK1 checkpoint: " + path);
  std::uint32_t len = 0;
  f.read(reinterpret_cast<char*>(&len), 4);
  std::string head(len, '\0');
  f.read(head.data(), len);
  if (!f) throw DataError("truncated checkpoint header: " + path);
  nlohmann::json header = nlohmann::json::parse(head);
  ShapeConfig shape = detail::shape_from_json(header.at("shape"));
  ParamSet params;
  for (const auto& entry : header.at("params")) {
    const std::string name = entry.at("name").get<std::string>();
    const std::vector<std::int64_t> dims = entry.at("dims").get<std::vector<std::int64_t>>();
    Tensor t = Tensor::zeros(dims);
    for (auto& v : t.data) {
      float x = 0.0f;
      f.read(reinterpret_cast<char*>(&x), 4);
      v = static_cast<double>(x);
    }
    if (!f) throw DataError("truncated checkpoint data at '" + name + "': " + path);
    params.add(name, std::move(t));
  }
  return {shape, std::move(params)};
}

}  // namespace vtsk
