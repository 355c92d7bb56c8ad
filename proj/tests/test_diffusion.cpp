// Copyright (c) 2026 The bkd Authors. All Rights Reserved.
//
// Licensed under the Apache License, Version 2.0 (the "License");
// you may not use this file except in compliance with the License.
// You may obtain a copy of the License at
//
//     http://www.apache.org/licenses/LICENSE-2.0
//
// Unless required by applicable law or agreed to in writing, software
// distributed under the License is distributed on an "AS IS" BASIS,
// WITHOUT WARRANTIES OR CONDITIONS OF ANY KIND, either express or implied.
// See the License for the specific language governing permissions and
// limitations under the License.

#include <gtest/gtest.h>

#include <cmath>

#include "bkd/diffusion.hpp"
#include "test_util.hpp"

namespace bkd {
namespace {

using testing::small_config;

Model<float> noisy_model(std::uint64_t seed) {
  auto m = build_unet<float>(small_config(), seed);
  testing::randomize(m, seed + 1, 0.08);
  return m;
}

Tensor<float> ctx(const Model<float>& m, int batch, std::uint64_t seed) {
  return randn<float>({batch, m.config().context_len, m.config().context_dim}, seed);
}

TEST(Schedule, LinearFirstEntry) {
  const auto s = make_schedule(ScheduleKind::Linear, 1000, 1e-4, 0.02);
  EXPECT_DOUBLE_EQ(s.ab(1), 0.9999);
  EXPECT_DOUBLE_EQ(s.ab(0), 1.0);
  EXPECT_NEAR(s.beta.back(), 0.02, 1e-15);
}

TEST(Schedule, InvariantsHoldForBothKinds) {
  for (auto kind : {ScheduleKind::Linear, ScheduleKind::ScaledLinear}) {
    for (int T : {1, 2, 50, 200, 1000}) {
      const auto s = make_schedule(kind, T, 8.5e-4, 0.012);
      ASSERT_EQ(s.beta.size(), static_cast<std::size_t>(T));
      for (int t = 1; t <= T; ++t) {
        EXPECT_GT(s.beta[static_cast<std::size_t>(t - 1)], 0.0);
        EXPECT_LT(s.beta[static_cast<std::size_t>(t - 1)], 1.0);
        EXPECT_LT(s.ab(t), s.ab(t - 1));
      }
    }
  }
}

TEST(Schedule, SingleStep) {
  const auto s = make_schedule(ScheduleKind::Linear, 1, 0.1, 0.1);
  EXPECT_EQ(s.alpha_bar.size(), 1u);
  EXPECT_DOUBLE_EQ(s.ab(1), 0.9);
}

TEST(Schedule, DomainErrors) {
  EXPECT_THROW(make_schedule(ScheduleKind::Linear, 0, 1e-4, 0.02), DomainError);
  EXPECT_THROW(make_schedule(ScheduleKind::Linear, 10, 0.0, 0.02), DomainError);
  EXPECT_THROW(make_schedule(ScheduleKind::Linear, 10, 0.03, 0.02), DomainError);
  EXPECT_THROW(make_schedule(ScheduleKind::Linear, 10, 1e-4, 1.0), DomainError);
}

TEST(Schedule, DefaultMatchesStandardAtThousandSteps) {
  const auto a = default_schedule(1000);
  const auto b = make_schedule(ScheduleKind::Linear, 1000, 1e-4, 0.02);
  EXPECT_EQ(a.beta, b.beta);
  EXPECT_LT(default_schedule(200).ab(200), 1e-3);
}

TEST(Schedule, JsonRoundTrip) {
  const auto s = make_schedule(ScheduleKind::ScaledLinear, 300, 8.5e-4, 0.012);
  const auto r = schedule_from_json(to_json(s));
  EXPECT_EQ(r.beta, s.beta);
  EXPECT_EQ(r.kind, s.kind);
}

TEST(ForwardDiffuse, ZeroNoiseAndZeroSignal) {
  const auto s = default_schedule(200);
  const auto z = randn<float>({2, 3, 4, 4}, 1);
  const Tensor<float> zero(z.shape());
  const auto a = forward_diffuse(z, zero, 37, s);
  const auto b = forward_diffuse(zero, z, 37, s);
  for (std::size_t i = 0; i < z.size(); ++i) {
    EXPECT_FLOAT_EQ(a[i], static_cast<float>(std::sqrt(s.ab(37))) * z[i]);
    EXPECT_FLOAT_EQ(b[i], static_cast<float>(std::sqrt(1 - s.ab(37))) * z[i]);
  }
}

TEST(ForwardDiffuse, PreservesUnitVariance) {
  const auto s = default_schedule(1000);
  for (int t : {1, 250, 600, 1000}) {
    const auto z = randn<double>({200000, 1, 1, 1}, derive_seed(9, {std::uint64_t(t), 0}));
    const auto e = randn<double>({200000, 1, 1, 1}, derive_seed(9, {std::uint64_t(t), 1}));
    const auto zt = forward_diffuse(z, e, t, s);
    double m = 0, v = 0;
    for (double x : zt.vec()) m += x;
    m /= zt.size();
    for (double x : zt.vec()) v += (x - m) * (x - m);
    v /= zt.size();
    EXPECT_NEAR(v, 1.0, 0.05) << "t=" << t;
  }
}

TEST(ForwardDiffuse, RejectsBadInput) {
  const auto s = default_schedule(200);
  const auto z = randn<float>({1, 3, 4, 4}, 1);
  EXPECT_THROW(forward_diffuse(z, randn<float>({1, 3, 4, 5}, 2), 3, s), DimensionError);
  EXPECT_THROW(forward_diffuse(z, z, 0, s), DomainError);
  EXPECT_THROW(forward_diffuse(z, z, 201, s), DomainError);
}

TEST(Losses, TaskLossContract) {
  const auto a = randn<float>({2, 3, 4, 4}, 3);
  auto b = a;
  EXPECT_EQ(task_loss(a, b), 0.0);
  for (auto& v : b.vec()) v += 1.0f;
  EXPECT_NEAR(task_loss(a, b), 1.0, 1e-6);
  const auto c = randn<float>({2, 3, 4, 4}, 4);
  double brute = 0;
  for (std::size_t i = 0; i < a.size(); ++i) brute += (double(a[i]) - c[i]) * (double(a[i]) - c[i]);
  EXPECT_NEAR(task_loss(a, c), brute / a.size(), 1e-9);
  EXPECT_THROW(task_loss(a, randn<float>({2, 3, 4, 5}, 1)), DimensionError);
}

TEST(Losses, OutputKdOffset) {
  const auto a = randn<float>({1, 2, 3, 3}, 5);
  auto b = a;
  EXPECT_EQ(output_kd_loss(a, b), 0.0);
  for (auto& v : b.vec()) v -= 0.5f;
  EXPECT_NEAR(output_kd_loss(a, b), 0.25, 1e-6);
}

TEST(Losses, NonnegativeAndZeroIffEqual) {
  Rng rng(11);
  for (int trial = 0; trial < 50; ++trial) {
    const Shape sh{uniform_int(rng, 1, 3), uniform_int(rng, 1, 4), uniform_int(rng, 1, 5), uniform_int(rng, 1, 5)};
    const auto a = randn<float>(sh, rng);
    auto b = a;
    EXPECT_EQ(task_loss(a, b), 0.0);
    b[static_cast<std::size_t>(uniform_int(rng, 0, static_cast<int>(b.size()) - 1))] += 0.25f;
    EXPECT_GT(task_loss(a, b), 0.0);
    EXPECT_GT(output_kd_loss(a, b), 0.0);
  }
}

TEST(Losses, FeatureKdSumsSharedTaps) {
  FeatureTapSet<float> t, s;
  t.entries = {{"down0", Tensor<float>({1, 1, 1, 2}, {0, 0})},
               {"mid", Tensor<float>({1, 1, 1, 1}, {1})},
               {"up0", Tensor<float>({1, 1, 1, 2}, {1, 1})}};
  s.entries = {{"down0", Tensor<float>({1, 1, 1, 2}, {1, 1})}, {"up0", Tensor<float>({1, 1, 1, 2}, {3, 1})}};
  // down0: (1 + 1) / 2 = 1, up0: (4 + 0) / 2 = 2
  EXPECT_DOUBLE_EQ(feature_kd_loss(t, s), 3.0);
  EXPECT_DOUBLE_EQ(feature_kd_loss(t, t), 0.0);
}

TEST(Losses, FeatureKdNamesMismatchedTap) {
  FeatureTapSet<float> t, s;
  t.entries = {{"up1", Tensor<float>({1, 2, 2, 2})}};
  s.entries = {{"up1", Tensor<float>({1, 2, 4, 4})}};
  try {
    feature_kd_loss(t, s);
    FAIL();
  } catch (const DimensionError& e) {
    EXPECT_NE(std::string(e.what()).find("up1"), std::string::npos);
  }
  s.entries = {{"mid", Tensor<float>({1, 2, 2, 2})}};
  EXPECT_THROW(feature_kd_loss(t, s), DimensionError);
}

TEST(Losses, TotalLossArithmetic) {
  EXPECT_DOUBLE_EQ(total_loss(1, 2, 3, {}).total, 6.0);
  EXPECT_DOUBLE_EQ(total_loss(1, 2, 3, {0, 0}).total, 1.0);
  EXPECT_DOUBLE_EQ(total_loss(1, 2, 3, {100, 100}).total, 501.0);
  const double base = total_loss(0.7, 0.3, 0.2, {1.5, 1}).total;
  const double doubled = total_loss(0.7, 0.3, 0.2, {3.0, 1}).total;
  EXPECT_DOUBLE_EQ(doubled - base, 1.5 * 0.3);
  EXPECT_THROW(total_loss(1, 1, 1, {-1, 0}), DomainError);
}

TEST(Losses, MseGradMatchesDifferences) {
  auto pred = randn<double>({1, 2, 3, 3}, 8);
  const auto target = randn<double>({1, 2, 3, 3}, 9);
  const auto g = mse_grad(target, pred, 2.5);
  const double err = testing::fd_max_rel_err(pred, g, [&] { return 2.5 * mse(target, pred); }, 100, 1);
  EXPECT_LT(err, 1e-6);
}

TEST(Sampler, TimestepGrid) {
  EXPECT_EQ(timestep_grid(1000, 4), (std::vector<int>{250, 500, 750, 1000}));
  EXPECT_EQ(timestep_grid(10, 10), (std::vector<int>{1, 2, 3, 4, 5, 6, 7, 8, 9, 10}));
  EXPECT_EQ(timestep_grid(200, 25).size(), 25u);
  EXPECT_EQ(timestep_grid(200, 25).back(), 200);
  EXPECT_EQ(timestep_grid(3, 5), (std::vector<int>{1, 2, 3}));
}

TEST(Sampler, GuidanceIdentities) {
  const auto m = noisy_model(3);
  const auto x = randn<float>({2, 2, 8, 8}, 4);
  const std::vector<int> t{10, 40};
  const auto c = ctx(m, 2, 5), u = ctx(m, 2, 6);
  const auto ec = forward(m, x, std::span<const int>(t), c).eps;
  const auto eu = forward(m, x, std::span<const int>(t), u).eps;
  EXPECT_EQ(guided_eps(m, x, std::span<const int>(t), c, u, 1.0).vec(), ec.vec());
  EXPECT_EQ(guided_eps(m, x, std::span<const int>(t), c, u, 0.0).vec(), eu.vec());
  const auto g = guided_eps(m, x, std::span<const int>(t), c, u, 7.5);
  for (std::size_t i = 0; i < g.size(); ++i) EXPECT_NEAR(g[i], eu[i] + 7.5f * (ec[i] - eu[i]), 1e-5);
}

TEST(Sampler, GuidanceOneEqualsPlainConditional) {
  const auto m = noisy_model(7);
  const auto sched = default_schedule(m.config().num_timesteps);
  const auto c = ctx(m, 2, 1);
  SamplerConfig cfg;
  cfg.steps = 6;
  cfg.guidance_scale = 1.0;
  cfg.seed = 3;
  // A conditional-only sampler: unconditional context is never used at s = 1.
  const auto a = sample(m, c, ctx(m, 2, 2), cfg, sched, 8, 8);
  const auto b = sample(m, c, c, cfg, sched, 8, 8);
  EXPECT_EQ(a.vec(), b.vec());
}

TEST(Sampler, DdimDeterministicAndSeeded) {
  const auto m = noisy_model(8);
  const auto sched = default_schedule(m.config().num_timesteps);
  const auto c = ctx(m, 2, 1), u = ctx(m, 2, 2);
  SamplerConfig cfg;
  cfg.steps = 5;
  cfg.seed = 11;
  const auto a = sample(m, c, u, cfg, sched, 8, 8);
  const auto b = sample(m, c, u, cfg, sched, 8, 8);
  EXPECT_EQ(a.vec(), b.vec());
  cfg.seed = 12;
  EXPECT_NE(sample(m, c, u, cfg, sched, 8, 8).vec(), a.vec());
  for (float v : a.vec()) {
    EXPECT_GE(v, -1.0f - 1e-5f);
    EXPECT_LE(v, 1.0f + 1e-5f);
  }
}

TEST(Sampler, RowsIndependentOfBatch) {
  const auto m = noisy_model(9);
  const auto sched = default_schedule(m.config().num_timesteps);
  const auto c = ctx(m, 3, 1), u = ctx(m, 3, 2);
  for (auto kind : {SamplerKind::Ddim, SamplerKind::Ddpm}) {
    SamplerConfig cfg;
    cfg.steps = 4;
    cfg.seed = 5;
    cfg.sampler = kind;
    const auto all = sample(m, c, u, cfg, sched, 8, 8);
    const auto first = sample(m, slice_batch(c, 0, 1), slice_batch(u, 0, 1), cfg, sched, 8, 8);
    const auto row = slice_batch(all, 0, 1);
    for (std::size_t i = 0; i < row.size(); ++i) EXPECT_NEAR(row[i], first[i], 1e-5);
  }
}

TEST(Sampler, DdpmIsStochasticAcrossSeeds) {
  const auto m = noisy_model(10);
  const auto sched = default_schedule(m.config().num_timesteps);
  const auto c = ctx(m, 1, 1), u = ctx(m, 1, 2);
  SamplerConfig cfg;
  cfg.steps = 4;
  cfg.sampler = SamplerKind::Ddpm;
  cfg.seed = 1;
  const auto a = sample(m, c, u, cfg, sched, 8, 8);
  EXPECT_EQ(a.vec(), sample(m, c, u, cfg, sched, 8, 8).vec());
  cfg.seed = 2;
  EXPECT_NE(a.vec(), sample(m, c, u, cfg, sched, 8, 8).vec());
}

TEST(Sampler, RejectsBadConfig) {
  const auto m = noisy_model(1);
  const auto sched = default_schedule(m.config().num_timesteps);
  const auto c = ctx(m, 1, 1);
  SamplerConfig cfg;
  cfg.steps = sched.T + 1;
  EXPECT_THROW(sample(m, c, c, cfg, sched, 8, 8), DomainError);
  cfg.steps = 0;
  EXPECT_THROW(sample(m, c, c, cfg, sched, 8, 8), DomainError);
  cfg.steps = 5;
  cfg.guidance_scale = -1;
  EXPECT_THROW(sample(m, c, c, cfg, sched, 8, 8), DomainError);
  EXPECT_THROW(parse_sampler("pndm"), ConfigError);
}

TEST(Sdedit, StrengthZeroIsIdentity) {
  const auto m = noisy_model(2);
  const auto sched = default_schedule(m.config().num_timesteps);
  const auto x = randn<float>({1, 2, 8, 8}, 3);
  const auto c = ctx(m, 1, 1);
  SamplerConfig cfg;
  EXPECT_EQ(sdedit(m, x, 0.0, c, c, cfg, sched).vec(), x.vec());
  EXPECT_THROW(sdedit(m, x, 1.5, c, c, cfg, sched), DomainError);
  EXPECT_THROW(sdedit(m, x, -0.1, c, c, cfg, sched), DomainError);
}

TEST(Sdedit, StrengthOneMatchesSamplingFromNoise) {
  const auto m = noisy_model(4);
  const auto sched = default_schedule(m.config().num_timesteps);
  const auto c = ctx(m, 1, 1), u = ctx(m, 1, 2);
  SamplerConfig cfg;
  cfg.steps = 5;
  cfg.seed = 21;
  const Tensor<float> input({1, 2, 8, 8});
  const auto a = sdedit(m, input, 1.0, c, u, cfg, sched);
  const auto b = sample(m, c, u, cfg, sched, 8, 8);
  // alpha_bar(T) is not exactly zero and the first x0 estimate divides by
  // sqrt(alpha_bar(T)), so the input signal is zeroed to isolate the boundary.
  double d = 0;
  for (std::size_t i = 0; i < a.size(); ++i) d = std::max(d, double(std::abs(a[i] - b[i])));
  EXPECT_LT(d, 0.1);
}

}  // namespace
}  // namespace bkd
