// SPDX-License-Identifier: Apache-2.0
#include <catch2/catch.hpp>

#include <cstdio>
#include <cstdlib>
#include <cstring>
#include <fstream>
#include <numeric>
#include <regex>

#include "test_util.hpp"
#include "vtsk/common.hpp"
#include "vtsk/shape_cost.hpp"
#include "vtsk/tensor.hpp"
#include "vtsk/vit.hpp"

using vtsk::BoundParams;
using vtsk::HeadType;
using vtsk::ParamSet;
using vtsk::Rng;
using vtsk::ShapeConfig;
using vtsk::Tape;
using vtsk::Tensor;
using vtsk::Var;

namespace {

ShapeConfig micro_shape(HeadType head) {
  ShapeConfig s;
  s.width = 32;
  s.depth = 2;
  s.mlp_width = 64;
  s.heads = 2;
  s.patch_size = 4;
  s.image_res = 16;
  s.channels = 1;
  s.num_classes = 4;
  s.head_type = head;
  return s;
}

Tensor random_images(std::int64_t b, const ShapeConfig& s, Rng& rng) {
  Tensor t = Tensor::zeros({b, s.image_res, s.image_res, s.channels});
  for (auto& v : t.data) v = rng.normal();
  return t;
}

}  // namespace

TEST_CASE("init_params is bit-identical for a fixed seed") {
  const ShapeConfig s = micro_shape(HeadType::kMap);
  ParamSet a = vtsk::init_params(s, 42);
  ParamSet b = vtsk::init_params(s, 42);
  REQUIRE(a.size() == b.size());
  auto it = b.begin();
  for (const auto& [name, tensor] : a) {
    CHECK(name == it->first);
    CHECK(tensor.data == it->second.data);
    ++it;
  }
  ParamSet c = vtsk::init_params(s, 43);
  CHECK(c.at("embed/kernel").data != a.at("embed/kernel").data);
}

TEST_CASE("classifier starts at zero, norm gains at one") {
  ParamSet p = vtsk::init_params(micro_shape(HeadType::kGap), 1);
  for (double v : p.at("head/kernel").data) CHECK(v == 0.0);
  for (double v : p.at("head/bias").data) CHECK(v == 0.0);
  for (double v : p.at("block0/ln1/gain").data) CHECK(v == 1.0);
  for (double v : p.at("final_norm/gain").data) CHECK(v == 1.0);
}

TEST_CASE("exactly one parameter matches the classifier pattern") {
  for (HeadType head : {HeadType::kCls, HeadType::kGap, HeadType::kMap}) {
    ParamSet p = vtsk::init_params(micro_shape(head), 0);
    const std::regex pat(".*head/kernel");
    int hits = 0;
    for (const auto& [name, tensor] : p) {
      (void)tensor;
      if (std::regex_match(name, pat)) ++hits;
    }
    CHECK(hits == 1);
  }
}

TEST_CASE("instantiated parameter counts equal the analytic count") {
  for (HeadType head : {HeadType::kCls, HeadType::kGap, HeadType::kMap}) {
    const ShapeConfig s = micro_shape(head);
    ParamSet p = vtsk::init_params(s, 3);
    std::int64_t body = 0, head_count = 0;
    for (const auto& [name, tensor] : p)
      (vtsk::is_head_param(name) ? head_count : body) += tensor.numel();
    const vtsk::ParamCount pc = vtsk::count_params(s);
    CHECK(body == pc.body);
    CHECK(head_count == pc.head);
  }
}

TEST_CASE("analytic count matches the layout for every published shape") {
  struct Row {
    const char* name;
    std::int64_t width, depth, mlp, heads;
  };
  const Row rows[] = {{"s/28", 256, 6, 1024, 8},   {"s/16", 256, 6, 1024, 8},
                      {"S/32", 384, 12, 1536, 6},  {"Ti/16", 192, 12, 768, 3},
                      {"B/32", 768, 12, 3072, 12}, {"S/16", 384, 12, 1536, 6},
                      {"B/28", 768, 12, 3072, 12}, {"B/16", 768, 12, 3072, 12},
                      {"L/16", 1024, 24, 4096, 16}, {"g/14", 1408, 40, 6144, 16},
                      {"G/14", 1664, 48, 8192, 16}};
  for (const Row& r : rows) {
    ShapeConfig s;
    s.width = r.width;
    s.depth = r.depth;
    s.mlp_width = r.mlp;
    s.heads = r.heads;
    s.patch_size = std::atoll(std::strchr(r.name, '/') + 1);
    s.image_res = 224;
    s.head_type = HeadType::kMap;
    std::int64_t body = 0, head = 0;
    for (const auto& spec : vtsk::param_layout(s))
      (vtsk::is_head_param(spec.name) ? head : body) += Tensor::numel_of(spec.dims);
    const vtsk::ParamCount pc = vtsk::count_params(s);
    CHECK(body == pc.body);
    CHECK(head == pc.head);
  }
}

TEST_CASE("patchify token counts") {
  Rng rng(5);
  Tensor img224 = Tensor::zeros({1, 224, 224, 3});
  CHECK(vtsk::patchify(img224, 14).shape == std::vector<std::int64_t>{1, 256, 14 * 14 * 3});
  CHECK(vtsk::patchify(img224, 16).shape == std::vector<std::int64_t>{1, 196, 16 * 16 * 3});
  CHECK_THROWS_AS(vtsk::patchify(img224, 15), vtsk::ShapeError);
}

TEST_CASE("patchify with patch 1 is an identity rearrangement") {
  Tensor img({1, 2, 2, 1}, {1.0, 2.0, 3.0, 4.0});
  Tensor patches = vtsk::patchify(img, 1);
  CHECK(patches.shape == std::vector<std::int64_t>{1, 4, 1});
  CHECK(patches.data == std::vector<double>{1.0, 2.0, 3.0, 4.0});
}

TEST_CASE("forward produces the contracted shapes for all heads") {
  Rng rng(7);
  for (HeadType head : {HeadType::kCls, HeadType::kGap, HeadType::kMap}) {
    const ShapeConfig s = micro_shape(head);
    ParamSet p = vtsk::init_params(s, 11);
    Tensor images = random_images(2, s, rng);
    auto [logits, features] = vtsk::forward_values(p, images, s);
    CHECK(logits.shape == std::vector<std::int64_t>{2, 4});
    CHECK(features.shape == std::vector<std::int64_t>{2, 32});
    for (double v : logits.data) CHECK(std::isfinite(v));
  }
}

TEST_CASE("zero classifier kernel means logits equal the head bias exactly") {
  const ShapeConfig s = micro_shape(HeadType::kGap);
  ParamSet p = vtsk::init_params(s, 13);
  p.at("head/bias") = Tensor({4}, {0.1, -0.2, 0.3, -0.4});
  Rng rng(17);
  Tensor images = random_images(3, s, rng);
  auto [logits, features] = vtsk::forward_values(p, images, s);
  (void)features;
  for (int i = 0; i < 3; ++i)
    for (int j = 0; j < 4; ++j) CHECK(logits.data[i * 4 + j] == p.at("head/bias").data[j]);
}

TEST_CASE("GAP feature is the token mean in the degenerate depth-0 case") {
  // width == patch_dim, identity embedding, zero positional table. Patches are
  // built with zero mean and unit variance so the final layer norm is a no-op
  // up to its epsilon.
  ShapeConfig s;
  s.width = 16;
  s.depth = 0;
  s.mlp_width = 1;
  s.heads = 1;
  s.patch_size = 4;
  s.image_res = 8;
  s.channels = 1;
  s.num_classes = 2;
  s.head_type = HeadType::kGap;
  ParamSet p = vtsk::init_params(s, 19);
  Tensor eye = Tensor::zeros({16, 16});
  for (int i = 0; i < 16; ++i) eye.data[i * 16 + i] = 1.0;
  p.at("embed/kernel") = eye;
  p.at("embed/bias") = Tensor::zeros({16});
  p.at("pos_embedding") = Tensor::zeros({4, 16});
  p.at("final_norm/bias") = Tensor::zeros({16});

  Tensor images = Tensor::zeros({1, 8, 8, 1});
  Rng rng(23);
  for (int t = 0; t < 4; ++t) {
    // each patch: eight +1s and eight -1s, shuffled
    std::vector<double> vals(16, 1.0);
    for (int i = 0; i < 8; ++i) vals[i] = -1.0;
    rng.shuffle(vals);
    const int gy = t / 2, gx = t % 2;
    for (int py = 0; py < 4; ++py)
      for (int px = 0; px < 4; ++px)
        images.data[(gy * 4 + py) * 8 + gx * 4 + px] = vals[py * 4 + px];
  }

  Tensor patches = vtsk::patchify(images, 4);
  std::vector<double> expected(16, 0.0);
  for (int t = 0; t < 4; ++t)
    for (int j = 0; j < 16; ++j) expected[j] += patches.data[t * 16 + j] / 4.0;

  auto [logits, features] = vtsk::forward_values(p, images, s);
  (void)logits;
  for (int j = 0; j < 16; ++j) CHECK(features.data[j] == Approx(expected[j]).margin(1e-6));
}

TEST_CASE("map_pool returns the common value for identical tokens") {
  const std::int64_t w = 8, heads = 2, b = 2, t = 5;
  ShapeConfig s = micro_shape(HeadType::kMap);
  s.width = w;
  s.heads = heads;
  ParamSet p = vtsk::init_params(s, 29);
  // value path and output projection become identities
  Tensor kv = Tensor::zeros({w, 2 * w});
  for (int i = 0; i < w; ++i) kv.data[i * 2 * w + w + i] = 1.0;
  p.at("map/attn/kv/kernel") = kv;
  p.at("map/attn/kv/bias") = Tensor::zeros({2 * w});
  Tensor eye = Tensor::zeros({w, w});
  for (int i = 0; i < w; ++i) eye.data[i * w + i] = 1.0;
  p.at("map/attn/out/kernel") = eye;
  p.at("map/attn/out/bias") = Tensor::zeros({w});

  Rng rng(31);
  std::vector<double> v(w);
  for (auto& x : v) x = rng.normal();
  Tensor tokens = Tensor::zeros({b, t, w});
  for (int i = 0; i < b * t; ++i)
    for (int j = 0; j < w; ++j) tokens.data[i * w + j] = v[j];

  Tape tape;
  BoundParams bound(tape, p, false);
  Var pooled = vtsk::map_pool(tape, tape.constant(tokens), bound, s);
  const Tensor& out = tape.value(pooled);
  REQUIRE(out.shape == std::vector<std::int64_t>{b, w});
  for (int i = 0; i < b; ++i)
    for (int j = 0; j < w; ++j) CHECK(out.data[i * w + j] == Approx(v[j]).margin(1e-12));
}

TEST_CASE("map_pool over one token ignores the query") {
  ShapeConfig s = micro_shape(HeadType::kMap);
  s.width = 8;
  s.heads = 2;
  ParamSet p = vtsk::init_params(s, 37);
  Rng rng(41);
  Tensor tokens = Tensor::zeros({1, 1, 8});
  for (auto& v : tokens.data) v = rng.normal();

  auto pool_with_query = [&](double query_scale) {
    ParamSet q = p;
    for (auto& v : q.at("map/query").data) v *= query_scale;
    Tape tape;
    BoundParams bound(tape, q, false);
    return tape.value(vtsk::map_pool(tape, tape.constant(tokens), bound, s)).data;
  };
  CHECK(pool_with_query(1.0) == pool_with_query(-17.5));
}

TEST_CASE("map_pool is permutation-invariant over tokens") {
  ShapeConfig s = micro_shape(HeadType::kMap);
  ParamSet p = vtsk::init_params(s, 43);
  Rng rng(47);
  const std::int64_t b = 2, t = 7, w = s.width;
  Tensor tokens = Tensor::zeros({b, t, w});
  for (auto& v : tokens.data) v = rng.normal();

  std::vector<std::int64_t> perm(t);
  std::iota(perm.begin(), perm.end(), 0);
  rng.shuffle(perm);
  Tensor shuffled = Tensor::zeros({b, t, w});
  for (std::int64_t i = 0; i < b; ++i)
    for (std::int64_t j = 0; j < t; ++j)
      for (std::int64_t k = 0; k < w; ++k)
        shuffled.data[(i * t + j) * w + k] = tokens.data[(i * t + perm[j]) * w + k];

  auto pool = [&](const Tensor& toks) {
    Tape tape;
    BoundParams bound(tape, p, false);
    return tape.value(vtsk::map_pool(tape, tape.constant(toks), bound, s)).data;
  };
  const auto a = pool(tokens);
  const auto c = pool(shuffled);
  for (std::size_t i = 0; i < a.size(); ++i) CHECK(a[i] == Approx(c[i]).margin(1e-12));
}

TEST_CASE("GAP and MAP logits survive a joint patch+positional permutation; CLS readout depends on position") {
  Rng rng(53);
  std::vector<std::int64_t> perm(16);
  std::iota(perm.begin(), perm.end(), 0);
  rng.shuffle(perm);

  auto permute_patches = [&](const Tensor& images, const ShapeConfig& s) {
    Tensor out = images;
    const std::int64_t g = s.grid(), ps = s.patch_size;
    for (std::int64_t tok = 0; tok < g * g; ++tok) {
      const std::int64_t src = perm[tok];
      for (std::int64_t py = 0; py < ps; ++py)
        for (std::int64_t px = 0; px < ps; ++px) {
          const auto sy = (src / g) * ps + py, sx = (src % g) * ps + px;
          const auto dy = (tok / g) * ps + py, dx = (tok % g) * ps + px;
          out.data[(dy * s.image_res + dx)] = images.data[(sy * s.image_res + sx)];
        }
    }
    return out;
  };

  for (HeadType head : {HeadType::kGap, HeadType::kMap}) {
    const ShapeConfig s = micro_shape(head);
    ParamSet p = vtsk::init_params(s, 59);
    for (auto& v : p.at("head/kernel").data) v = rng.normal();  // non-trivial logits
    Tensor images = random_images(1, s, rng);
    Tensor shuffled_images = permute_patches(images, s);
    ParamSet p2 = p;
    Tensor pos = p.at("pos_embedding");
    Tensor pos2 = pos;
    for (std::int64_t tok = 0; tok < 16; ++tok)
      for (std::int64_t j = 0; j < s.width; ++j)
        pos2.data[tok * s.width + j] = pos.data[perm[tok] * s.width + j];
    p2.at("pos_embedding") = pos2;

    auto [la, fa] = vtsk::forward_values(p, images, s);
    auto [lb, fb] = vtsk::forward_values(p2, shuffled_images, s);
    (void)fa;
    (void)fb;
    for (std::size_t i = 0; i < la.data.size(); ++i)
      CHECK(la.data[i] == Approx(lb.data[i]).margin(1e-12));
  }

  // CLS: shuffling patches without moving the positional table changes the
  // readout (learned positions make token order matter).
  const ShapeConfig s = micro_shape(HeadType::kCls);
  ParamSet p = vtsk::init_params(s, 61);
  for (auto& v : p.at("head/kernel").data) v = rng.normal();
  Tensor images = random_images(1, s, rng);
  auto [la, fa] = vtsk::forward_values(p, images, s);
  auto [lb, fb] = vtsk::forward_values(p, permute_patches(images, s), s);
  (void)fa;
  (void)fb;
  double max_diff = 0.0;
  for (std::size_t i = 0; i < la.data.size(); ++i)
    max_diff = std::max(max_diff, std::abs(la.data[i] - lb.data[i]));
  CHECK(max_diff > 1e-9);
}

TEST_CASE("whole-model gradcheck on a small shape, all heads") {
  ShapeConfig s;
  s.width = 8;
  s.depth = 1;
  s.mlp_width = 16;
  s.heads = 2;
  s.patch_size = 8;
  s.image_res = 16;
  s.channels = 1;
  s.num_classes = 3;
  Rng rng(67);
  for (HeadType head : {HeadType::kCls, HeadType::kGap, HeadType::kMap}) {
    s.head_type = head;
    Tensor images = random_images(2, s, rng);
    const double err = vtsk_test::model_gradcheck(s, images, {0, 2}, 71);
    INFO("head " << vtsk::to_string(head));
    CHECK(err < 1e-4);
  }
}

TEST_CASE("checkpoint round-trips through the VTSK1 format") {
  const ShapeConfig s = micro_shape(HeadType::kMap);
  ParamSet p = vtsk::init_params(s, 73);
  const std::string path = "vit_test_checkpoint.bin";
  vtsk::save_checkpoint(path, s, p);

  auto [shape2, p2] = vtsk::load_checkpoint(path);
  CHECK(shape2.width == s.width);
  CHECK(shape2.head_type == s.head_type);
  REQUIRE(p2.size() == p.size());
  for (const auto& [name, tensor] : p) {
    const Tensor& loaded = p2.at(name);
    REQUIRE(loaded.shape == tensor.shape);
    for (std::size_t i = 0; i < tensor.data.size(); ++i)
      CHECK(loaded.data[i] == static_cast<double>(static_cast<float>(tensor.data[i])));
  }

  // deterministic bytes
  vtsk::save_checkpoint("vit_test_checkpoint2.bin", s, p);
  std::ifstream a(path, std::ios::binary), b("vit_test_checkpoint2.bin", std::ios::binary);
  std::string sa((std::istreambuf_iterator<char>(a)), std::istreambuf_iterator<char>());
  std::string sb((std::istreambuf_iterator<char>(b)), std::istreambuf_iterator<char>());
  CHECK(sa == sb);
  CHECK(sa.substr(0, 5) == "VTSK1");
  std::remove(path.c_str());
  std::remove("vit_test_checkpoint2.bin");
}

TEST_CASE("checkpoint loader rejects foreign files") {
  const std::string path = "vit_test_bogus.bin";
  {
    std::ofstream f(path, std::ios::binary);
    f << "not a checkpoint at all";
  }
  CHECK_THROWS_AS(vtsk::load_checkpoint(path), vtsk::DataError);
  std::remove(path.c_str());
}
