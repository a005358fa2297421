// SPDX-License-Identifier: Apache-2.0
#include <catch2/catch.hpp>

#include <cmath>
#include <cstring>
#include <vector>

#include "vtsk/common.hpp"
#include "vtsk/optim.hpp"

using vtsk::AdafactorState;
using vtsk::AdamState;
using vtsk::MomentumStorage;
using vtsk::OptimConfig;
using vtsk::Rng;
using vtsk::ScheduleConfig;
using vtsk::Tensor;
using vtsk::WeightDecayRule;

namespace {

// Independent bf16 oracle: truncate the f32 bits, compare the two bracketing
// grid values in double precision, break ties toward the even mantissa.
double bf16_oracle(double x) {
  const float f = static_cast<float>(x);
  std::uint32_t bits;
  std::memcpy(&bits, &f, 4);
  const std::uint32_t lo_bits = bits & 0xFFFF0000u;
  const std::uint32_t hi_bits = lo_bits + 0x10000u;
  float lo, hi;
  std::memcpy(&lo, &lo_bits, 4);
  std::memcpy(&hi, &hi_bits, 4);
  const double dl = std::abs(static_cast<double>(f) - lo);
  const double dh = std::abs(static_cast<double>(hi) - f);
  if (dl < dh) return lo;
  if (dh < dl) return hi;
  return ((lo_bits >> 16) & 1u) == 0 ? lo : hi;  // tie: even wins
}

}  // namespace

TEST_CASE("bf16_round exact values") {
  CHECK(vtsk::bf16_round(1.0) == 1.0);
  CHECK(vtsk::bf16_round(-0.0) == 0.0);
  CHECK(std::signbit(vtsk::bf16_round(-0.0)));
  CHECK(vtsk::bf16_round(3.14159265) == 3.140625);
  CHECK(vtsk::bf16_round(3.14159265) == bf16_oracle(3.14159265));
  CHECK(std::isinf(vtsk::bf16_round(HUGE_VAL)));
  CHECK(std::isnan(vtsk::bf16_round(std::nan(""))));
}

TEST_CASE("bf16_round matches the bit-level oracle on random values") {
  Rng rng(5);
  for (int i = 0; i < 2000; ++i) {
    const double mag = std::pow(10.0, rng.uniform() * 20.0 - 10.0);
    const double x = (rng.uniform() < 0.5 ? -1.0 : 1.0) * mag * (1.0 + rng.uniform());
    CHECK(vtsk::bf16_round(x) == bf16_oracle(x));
  }
}

TEST_CASE("bf16_round is idempotent, monotone, and close") {
  Rng rng(6);
  double prev_x = -1e30, prev_y = vtsk::bf16_round(prev_x);
  for (int i = 0; i < 1000; ++i) {
    const double x = rng.normal() * 100.0;
    const double y = vtsk::bf16_round(x);
    CHECK(vtsk::bf16_round(y) == y);
    CHECK(std::abs(y - x) <= std::abs(x) / 256.0);
    if (x >= prev_x) CHECK(y >= prev_y);
    if (x < prev_x) CHECK(y <= prev_y);
    prev_x = x;
    prev_y = y;
  }
}

TEST_CASE("adam first step is a bias-corrected sign step") {
  Tensor p({1}, {0.0});
  Tensor g({1}, {0.37});
  AdamState st = AdamState::init({1}, MomentumStorage::kFull64);
  vtsk::adam_step(p, g, st, 0.01);
  CHECK(p.data[0] == Approx(-0.01).epsilon(1e-6));
}

TEST_CASE("adam leaves the parameter alone on zero grad from zero state") {
  Tensor p({2}, {1.5, -2.0});
  Tensor g = Tensor::zeros({2});
  AdamState st = AdamState::init({2}, MomentumStorage::kFull64);
  vtsk::adam_step(p, g, st, 0.1);
  CHECK(p.data == std::vector<double>{1.5, -2.0});
}

TEST_CASE("adam rejects non-finite gradients") {
  Tensor p({1}, {0.0});
  Tensor g({1}, {std::nan("")});
  AdamState st = AdamState::init({1}, MomentumStorage::kFull64);
  CHECK_THROWS_AS(vtsk::adam_step(p, g, st, 0.1), vtsk::ValueError);
}

TEST_CASE("adam converges on x^2 in both momentum storage modes") {
  auto run = [](MomentumStorage storage) {
    Tensor x({1}, {1.0});
    AdamState st = AdamState::init({1}, storage);
    for (int i = 0; i < 200; ++i) {
      Tensor g({1}, {2.0 * x.data[0]});
      vtsk::adam_step(x, g, st, 0.1);
      if (storage == MomentumStorage::kBf16)
        CHECK(vtsk::bf16_round(st.m.data[0]) == st.m.data[0]);
    }
    return x.data[0];
  };
  const double full = run(MomentumStorage::kFull64);
  const double half = run(MomentumStorage::kBf16);
  CHECK(std::abs(full) < 1e-2);
  CHECK(std::abs(half) < 1e-2);
}

TEST_CASE("adam storage modes agree exactly while momenta stay bf16-representable") {
  OptimConfig cfg;
  cfg.beta1 = 0.5;
  Tensor pf({3}, {0.0, 1.0, -1.0});
  Tensor ph = pf;
  AdamState sf = AdamState::init({3}, MomentumStorage::kFull64);
  AdamState sh = AdamState::init({3}, MomentumStorage::kBf16);
  for (int i = 0; i < 5; ++i) {
    Tensor g({3}, {2.0, -4.0, 0.5});  // dyadic: m stays on the bf16 grid
    vtsk::adam_step(pf, g, sf, 0.01, cfg);
    vtsk::adam_step(ph, g, sh, 0.01, cfg);
  }
  CHECK(pf.data == ph.data);
  CHECK(sf.m.data == sh.m.data);
}

TEST_CASE("adafactor rank-1 factorization is exact at t=1") {
  Tensor p = Tensor::zeros({2, 2});
  Tensor g({2, 2}, {1, 2, 2, 4});  // G^2 = [[1,4],[4,16]] has rank 1
  AdafactorState st = AdafactorState::init({2, 2});
  vtsk::adafactor_step(p, g, st, 0.01);
  CHECK(st.row_acc.data[0] == Approx(5.0).epsilon(1e-12));
  CHECK(st.row_acc.data[1] == Approx(20.0).epsilon(1e-12));
  CHECK(st.col_acc.data[0] == Approx(5.0).epsilon(1e-12));
  CHECK(st.col_acc.data[1] == Approx(20.0).epsilon(1e-12));
  const Tensor vhat = vtsk::adafactor_vhat(st, {2, 2});
  const std::vector<double> expected = {1, 4, 4, 16};
  for (int i = 0; i < 4; ++i) CHECK(vhat.data[i] == Approx(expected[i]).epsilon(1e-12));
}

TEST_CASE("adafactor vectors use the full second moment") {
  Tensor p = Tensor::zeros({3});
  Tensor g({3}, {1.0, -2.0, 0.5});
  AdafactorState st = AdafactorState::init({3});
  CHECK_FALSE(st.factored);
  vtsk::adafactor_step(p, g, st, 0.01);
  const Tensor vhat = vtsk::adafactor_vhat(st, {3});
  for (int i = 0; i < 3; ++i)
    CHECK(vhat.data[i] == Approx(g.data[i] * g.data[i]).epsilon(1e-9));
}

TEST_CASE("factored and full second moments have equal mass") {
  Rng rng(17);
  const std::int64_t rows = 6, cols = 7;
  AdafactorState st = AdafactorState::init({rows, cols});
  Tensor p = Tensor::zeros({rows, cols});
  OptimConfig cfg;
  Tensor v_full = Tensor::zeros({rows, cols});  // reference unfactored accumulator
  for (int step = 1; step <= 25; ++step) {
    Tensor g = Tensor::zeros({rows, cols});
    for (auto& x : g.data) x = rng.normal();
    vtsk::adafactor_step(p, g, st, 0.001, cfg);
    const double b2 = vtsk::adafactor_beta2(step, cfg);
    for (std::size_t i = 0; i < v_full.data.size(); ++i)
      v_full.data[i] =
          b2 * v_full.data[i] + (1.0 - b2) * (g.data[i] * g.data[i] + cfg.eps_factored);
    const Tensor vhat = vtsk::adafactor_vhat(st, {rows, cols});
    double sum_vhat = 0.0, sum_full = 0.0;
    for (double x : vhat.data) sum_vhat += x;
    for (double x : v_full.data) sum_full += x;
    CHECK(std::abs(sum_vhat - sum_full) <= 1e-10 * std::max(1.0, std::abs(sum_full)));
  }
}

TEST_CASE("adafactor beta2 ramp is nondecreasing and capped") {
  double prev = 0.0;
  for (std::int64_t t : {1, 2, 3, 5, 10, 50, 100, 1000, 10000, 1000000}) {
    const double b2 = vtsk::adafactor_beta2(t);
    CHECK(b2 >= prev);
    CHECK(b2 <= 0.999);
    prev = b2;
  }
  CHECK(vtsk::adafactor_beta2(1) == 0.0);
  CHECK(vtsk::adafactor_beta2(1000000) == 0.999);
}

TEST_CASE("adafactor reaches adam-comparable loss on a random PD quadratic") {
  // f(W) = 0.5 tr((W - W*)^T A (W - W*)), A = B^T B + I
  Rng rng(23);
  const std::int64_t n = 10;
  Tensor A = Tensor::zeros({n, n});
  {
    Tensor B = Tensor::zeros({n, n});
    for (auto& v : B.data) v = rng.normal() * 0.3;
    for (std::int64_t i = 0; i < n; ++i)
      for (std::int64_t j = 0; j < n; ++j) {
        double acc = (i == j) ? 1.0 : 0.0;
        for (std::int64_t k = 0; k < n; ++k) acc += B.data[k * n + i] * B.data[k * n + j];
        A.data[i * n + j] = acc;
      }
  }
  Tensor target = Tensor::zeros({n, n});
  for (auto& v : target.data) v = rng.normal();

  auto grad_at = [&](const Tensor& w) {
    Tensor d = Tensor::zeros({n, n});
    for (std::int64_t i = 0; i < n; ++i)
      for (std::int64_t j = 0; j < n; ++j) {
        double acc = 0.0;
        for (std::int64_t k = 0; k < n; ++k)
          acc += A.data[i * n + k] * (w.data[k * n + j] - target.data[k * n + j]);
        d.data[i * n + j] = acc;
      }
    return d;
  };
  auto loss_at = [&](const Tensor& w) {
    double acc = 0.0;
    const Tensor d = grad_at(w);
    for (std::int64_t i = 0; i < n * n; ++i) acc += 0.5 * (w.data[i] - target.data[i]) * d.data[i];
    return acc;
  };

  auto best_final = [&](bool use_adafactor) {
    double best = HUGE_VAL;
    for (double lr : {0.3, 0.1, 0.03, 0.01}) {
      Tensor w = Tensor::zeros({n, n});
      AdamState as = AdamState::init({n, n}, MomentumStorage::kFull64);
      AdafactorState fs = AdafactorState::init({n, n});
      for (int step = 0; step < 2000; ++step) {
        Tensor g = grad_at(w);
        if (use_adafactor)
          vtsk::adafactor_step(w, g, fs, lr);
        else
          vtsk::adam_step(w, g, as, lr);
      }
      best = std::min(best, loss_at(w));
    }
    return best;
  };

  const double adam_loss = best_final(false);
  const double adafactor_loss = best_final(true);
  INFO("adam " << adam_loss << " adafactor " << adafactor_loss);
  CHECK(adafactor_loss <= 10.0 * std::max(adam_loss, 1e-12));
}

TEST_CASE("weight decay: head and body shrink by the configured amounts") {
  std::vector<std::pair<std::string, Tensor>> params;
  params.emplace_back("head/kernel", Tensor({1}, {1.0}));
  params.emplace_back("block0/mlp/fc1/kernel", Tensor({1}, {1.0}));
  params.emplace_back("block0/ln1/bias", Tensor({1}, {1.0}));
  std::vector<WeightDecayRule> rules = {{".*head/kernel", 100.0}, {".*/kernel", 1.0}};
  const double base_wd = 0.03 * 8e-4;
  vtsk::decay_params(params, rules, base_wd);
  CHECK(params[0].second.data[0] == Approx(0.9976).epsilon(1e-12));
  CHECK(params[1].second.data[0] == Approx(0.999976).epsilon(1e-12));
  CHECK(params[2].second.data[0] == 1.0);

  const double ratio = std::log(params[0].second.data[0]) / std::log(params[1].second.data[0]);
  CHECK(std::abs(ratio - 100.0) / 100.0 < 0.003);
}

TEST_CASE("weight decay rejects a shrink that would zero or flip weights") {
  std::vector<std::pair<std::string, Tensor>> params;
  params.emplace_back("head/kernel", Tensor({1}, {1.0}));
  std::vector<WeightDecayRule> rules = {{".*head/kernel", 100.0}};
  CHECK_THROWS_AS(vtsk::decay_params(params, rules, 0.01), vtsk::ConfigError);
}

TEST_CASE("first matching weight decay rule wins") {
  std::vector<WeightDecayRule> rules = {{".*head/kernel", 100.0}, {".*/kernel", 1.0}};
  CHECK(vtsk::decay_multiplier("head/kernel", rules) == 100.0);
  CHECK(vtsk::decay_multiplier("block3/attn/qkv/kernel", rules) == 1.0);
  CHECK(vtsk::decay_multiplier("block3/ln1/gain", rules) == 0.0);
  CHECK(vtsk::decay_multiplier("pos_embedding", rules) == 0.0);
}

TEST_CASE("lr schedule hits the closed-form values") {
  ScheduleConfig s;
  s.base_lr = 8e-4;
  s.warmup_steps = 10000;
  s.decay_type = vtsk::DecayType::kRsqrt;
  s.timescale = 10000;
  s.total_steps = 100000;
  s.cooldown_steps = 50000;

  CHECK(vtsk::lr_at(s, 0) == 0.0);
  CHECK(vtsk::lr_at(s, 5000) == Approx(4e-4).epsilon(1e-12));
  CHECK(vtsk::lr_at(s, 10000) == Approx(8e-4).epsilon(1e-12));
  CHECK(vtsk::lr_at(s, 40000) == Approx(4e-4).epsilon(1e-12));
  CHECK(vtsk::lr_at(s, 100000) == 0.0);
  CHECK(vtsk::lr_at(s, 100001) == 0.0);
}

TEST_CASE("lr schedule is continuous step to step") {
  for (auto decay : {vtsk::DecayType::kLinear, vtsk::DecayType::kConstant,
                     vtsk::DecayType::kRsqrt}) {
    ScheduleConfig s;
    s.base_lr = 8e-4;
    s.warmup_steps = 1000;
    s.decay_type = decay;
    s.timescale = 1000;
    s.total_steps = 10000;
    s.cooldown_steps = 5000;
    double prev = vtsk::lr_at(s, 0);
    double max_jump = 0.0;
    for (std::int64_t k = 1; k <= s.total_steps; ++k) {
      const double cur = vtsk::lr_at(s, k);
      max_jump = std::max(max_jump, std::abs(cur - prev));
      prev = cur;
    }
    const double bound =
        s.base_lr * (1.0 / s.warmup_steps + 1.0 / s.cooldown_steps +
                     1.0 / (s.total_steps - s.warmup_steps) + 1.0 / s.timescale);
    CHECK(max_jump <= bound);
  }
}

TEST_CASE("lr schedule validates its phases") {
  ScheduleConfig s;
  s.base_lr = 1e-3;
  s.warmup_steps = 600;
  s.total_steps = 1000;
  s.cooldown_steps = 600;
  CHECK_THROWS_AS(vtsk::lr_at(s, 0), vtsk::ConfigError);
}

TEST_CASE("open-ended rsqrt schedule never ends") {
  ScheduleConfig s;
  s.base_lr = 1e-3;
  s.warmup_steps = 100;
  s.decay_type = vtsk::DecayType::kRsqrt;
  s.timescale = 100;
  s.total_steps = 0;
  CHECK(vtsk::lr_at(s, 100000000) > 0.0);
}

TEST_CASE("global norm clipping") {
  Tensor g({2}, {3.0, 4.0});
  auto r1 = vtsk::clip_global_norm({&g}, 10.0);
  CHECK(r1.norm == Approx(5.0));
  CHECK(r1.scale == 1.0);
  CHECK(g.data == std::vector<double>{3.0, 4.0});

  auto r2 = vtsk::clip_global_norm({&g}, 1.0);
  CHECK(r2.scale == Approx(0.2));
  CHECK(g.data[0] == Approx(0.6).epsilon(1e-12));
  CHECK(g.data[1] == Approx(0.8).epsilon(1e-12));
}

TEST_CASE("joint clipping norm equals the concatenated-vector norm") {
  Rng rng(31);
  Tensor a = Tensor::zeros({5});
  Tensor b = Tensor::zeros({3, 2});
  for (auto& v : a.data) v = rng.normal();
  for (auto& v : b.data) v = rng.normal();

  std::vector<double> all(a.data);
  all.insert(all.end(), b.data.begin(), b.data.end());
  double sq = 0.0;
  for (double v : all) sq += v * v;
  const double concat_norm = std::sqrt(sq);

  auto r = vtsk::clip_global_norm({&a, &b}, 1e9);
  CHECK(std::abs(r.norm - concat_norm) < 1e-12 * std::max(1.0, concat_norm));
}

TEST_CASE("polyak averaging") {
  Tensor avg({2}, {5.0, -5.0});
  Tensor p({2}, {1.0, 2.0});
  vtsk::polyak_update(avg, p, 0.0);
  CHECK(avg.data == p.data);

  // constant params: geometric approach
  Tensor avg2 = Tensor::zeros({1});
  Tensor c({1}, {3.0});
  for (int i = 0; i < 400; ++i) vtsk::polyak_update(avg2, c, 0.9);
  CHECK(avg2.data[0] == Approx(3.0).epsilon(1e-10));

  // alternating +-1 converges to the closed-form two-cycle (1-d)/(1+d)
  const double d = 0.9;
  Tensor avg3 = Tensor::zeros({1});
  double after_plus = 0.0;
  for (int i = 0; i < 2000; ++i) {
    Tensor x({1}, {i % 2 == 0 ? 1.0 : -1.0});
    vtsk::polyak_update(avg3, x, d);
    if (i % 2 == 0) after_plus = avg3.data[0];
  }
  CHECK(after_plus == Approx((1.0 - d) / (1.0 + d)).epsilon(1e-6));
  CHECK(std::abs(avg3.data[0]) < 1.0);
}
