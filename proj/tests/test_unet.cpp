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

#include "bkd/archive.hpp"
#include "bkd/compression.hpp"
#include "bkd/unet.hpp"
#include "test_util.hpp"

namespace bkd {
namespace {

using testing::small_config;

struct Inputs {
  Tensor<float> z;
  std::vector<int> t;
  Tensor<float> ctx;
};

Inputs make_inputs(const UNetConfig& cfg, int batch, int hw, std::uint64_t seed) {
  Inputs in;
  in.z = randn<float>({batch, cfg.in_channels, hw, hw}, derive_seed(seed, {1}));
  Rng rng(derive_seed(seed, {2}));
  for (int b = 0; b < batch; ++b) in.t.push_back(uniform_int(rng, 1, cfg.num_timesteps));
  in.ctx = randn<float>({batch, cfg.context_len, cfg.context_dim}, derive_seed(seed, {3}));
  return in;
}

TEST(BuildUnet, SmallConfigPreservesShape) {
  const auto cfg = small_config();
  auto m = build_unet<float>(cfg, 1);
  auto in = make_inputs(cfg, 2, 8, 3);
  auto out = forward(m, in.z, in.t, in.ctx);
  EXPECT_EQ(out.eps.shape(), in.z.shape());
  EXPECT_TRUE(out.eps.all_finite());
}

TEST(BuildUnet, SameSeedIsBitIdentical) {
  const auto cfg = toy_config();
  EXPECT_TRUE(build_unet<float>(cfg, 5) == build_unet<float>(cfg, 5));
  EXPECT_FALSE(build_unet<float>(cfg, 5) == build_unet<float>(cfg, 6));
}

TEST(BuildUnet, ParametersAddressableByPath) {
  auto m = build_unet<float>(toy_config(), 1);
  EXPECT_TRUE(m.has("down.0.1.attn2.to_k.weight"));
  EXPECT_TRUE(m.has("up.2.0.shortcut.weight"));
  EXPECT_TRUE(m.has("mid.0.0.conv1.weight"));
  EXPECT_EQ(m.param("down.0.0.conv1.weight").shape(), (Shape{16, 16, 3, 3}));
}

TEST(BuildUnet, RejectsNonDividingHeadsAndGroups) {
  auto cfg = small_config(8, 16, 3, 4);
  try {
    build_unet<float>(cfg, 1);
    FAIL() << "expected ConfigError";
  } catch (const ConfigError& e) {
    EXPECT_NE(std::string(e.what()).find("attention_heads"), std::string::npos);
  }
  cfg = small_config(8, 16, 2, 3);
  try {
    build_unet<float>(cfg, 1);
    FAIL() << "expected ConfigError";
  } catch (const ConfigError& e) {
    EXPECT_NE(std::string(e.what()).find("norm_groups"), std::string::npos);
  }
}

TEST(BuildUnet, ReportsEveryProblem) {
  auto cfg = small_config(8, 16, 3, 3);
  cfg.context_len = 0;
  try {
    validate(cfg);
    FAIL() << "expected ConfigError";
  } catch (const ConfigError& e) {
    bool heads = false, groups = false, len = false;
    for (const auto& p : e.problems()) {
      heads |= p.find("attention_heads") != std::string::npos;
      groups |= p.find("norm_groups") != std::string::npos;
      len |= p.find("context_len") != std::string::npos;
    }
    EXPECT_TRUE(heads && groups && len) << e.what();
  }
}

TEST(Forward, ToyTapContract) {
  const auto cfg = toy_config();
  auto m = build_unet<float>(cfg, 2);
  auto in = make_inputs(cfg, 2, 16, 4);
  auto out = forward(m, in.z, in.t, in.ctx);
  EXPECT_EQ(out.eps.shape(), (Shape{2, 3, 16, 16}));
  ASSERT_EQ(out.taps.size(), cfg.down_stages.size() + 1 + cfg.up_stages.size());
  const std::vector<std::string> ids{"down0", "down1", "down2", "mid", "up2", "up1", "up0"};
  for (std::size_t i = 0; i < ids.size(); ++i) EXPECT_EQ(out.taps.entries[i].first, ids[i]);
  EXPECT_EQ(out.taps.find("down0")->shape(), (Shape{2, 16, 16, 16}));
  EXPECT_EQ(out.taps.find("mid")->shape(), (Shape{2, 32, 4, 4}));
  EXPECT_EQ(out.taps.find("up0")->shape(), (Shape{2, 16, 16, 16}));
}

TEST(Forward, IsPure) {
  const auto cfg = toy_config();
  auto m = build_unet<float>(cfg, 2);
  testing::randomize(m, 9, 0.1);
  auto in = make_inputs(cfg, 2, 16, 5);
  auto a = forward(m, in.z, in.t, in.ctx);
  auto b = forward(m, in.z, in.t, in.ctx);
  EXPECT_EQ(a.eps, b.eps);
  for (std::size_t i = 0; i < a.taps.size(); ++i) EXPECT_EQ(a.taps.entries[i].second, b.taps.entries[i].second);
}

TEST(Forward, ErrorsOnBadInputs) {
  const auto cfg = small_config();
  auto m = build_unet<float>(cfg, 1);
  auto in = make_inputs(cfg, 2, 8, 3);
  Tensor<float> wrong({2, 3, 8, 8});
  EXPECT_THROW(forward(m, wrong, in.t, in.ctx), DimensionError);
  Tensor<float> odd({2, 2, 7, 7});
  EXPECT_THROW(forward(m, odd, in.t, in.ctx), DimensionError);
  std::vector<int> t0{0, 1};
  EXPECT_THROW(forward(m, in.z, t0, in.ctx), DomainError);
  std::vector<int> tbig{1, cfg.num_timesteps + 1};
  EXPECT_THROW(forward(m, in.z, tbig, in.ctx), DomainError);
  Tensor<float> ctx({2, cfg.context_len + 1, cfg.context_dim});
  EXPECT_THROW(forward(m, in.z, in.t, ctx), DimensionError);
}

TEST(Forward, CrossAttentionRowsAreDistributions) {
  const auto cfg = toy_config();
  auto m = build_unet<float>(cfg, 3);
  testing::randomize(m, 4, 0.2);
  auto in = make_inputs(cfg, 2, 16, 6);
  AttentionRecorder rec;
  ForwardOptions opts;
  opts.recorder = &rec;
  forward(m, in.z, in.t, in.ctx, static_cast<Trace<float>*>(nullptr), opts);
  ASSERT_FALSE(rec.empty());
  for (const auto& r : rec) {
    const int l = cfg.context_len;
    ASSERT_EQ(r.probs.dim(3), l);
    EXPECT_EQ(r.probs.dim(2), r.height * r.width);
    for (std::size_t row = 0; row < r.probs.size() / static_cast<std::size_t>(l); ++row) {
      double s = 0;
      for (int j = 0; j < l; ++j) {
        const float p = r.probs[row * static_cast<std::size_t>(l) + static_cast<std::size_t>(j)];
        ASSERT_GE(p, 0.0f);
        s += p;
      }
      ASSERT_NEAR(s, 1.0, 1e-5);
    }
  }
}

TEST(Forward, StudentTapsMatchTeacherShapes) {
  const auto teacher = toy_config();
  auto tm = build_unet<float>(teacher, 1);
  auto in = make_inputs(teacher, 2, 16, 7);
  auto tout = forward(tm, in.z, in.t, in.ctx);
  for (Preset p : {Preset::Base, Preset::Small, Preset::Tiny}) {
    auto r = apply_plan(teacher, preset_plan(p, teacher));
    auto sm = build_unet<float>(r.student, 1);
    auto sout = forward(sm, in.z, in.t, in.ctx);
    EXPECT_EQ(sout.eps.shape(), in.z.shape());
    for (const auto& [id, f] : sout.taps.entries) {
      const auto* tf = tout.taps.find(id);
      ASSERT_NE(tf, nullptr) << id;
      EXPECT_EQ(tf->shape(), f.shape()) << to_string(p) << " " << id;
    }
  }
}

// Random small configurations: shape preservation, skip balance, and the
// analytic parameter declaration agree with the instantiated model.
TEST(ForwardProperty, RandomConfigsPreserveShape) {
  Rng rng(2024);
  for (int trial = 0; trial < 12; ++trial) {
    SdLayout o;
    const int stages = uniform_int(rng, 1, 3);
    const int groups = uniform_int(rng, 0, 1) ? 2 : 4;
    for (int s = 0; s < stages; ++s) o.stage_channels.push_back(4 * uniform_int(rng, 1, 3));
    for (int s = 0; s < stages; ++s) o.attention_levels.push_back(uniform_int(rng, 0, 1) == 1);
    o.layers_per_block = uniform_int(rng, 1, 2);
    o.attention_heads = {uniform_int(rng, 0, 1) ? 1 : 2};
    o.context_dim = 4 * uniform_int(rng, 1, 2);
    o.context_len = uniform_int(rng, 1, 4);
    o.norm_groups = groups;
    o.time_embed_dim = 8 * uniform_int(rng, 1, 2);
    o.in_channels = uniform_int(rng, 1, 3);
    o.out_channels = o.in_channels;
    o.num_timesteps = 20;
    o.mid_attention = uniform_int(rng, 0, 1) == 1;
    const auto cfg = build_sd_layout(o);
    const Wiring w = walk(cfg);
    ASSERT_TRUE(w.ok()) << trial;
    auto m = build_unet<float>(cfg, static_cast<std::uint64_t>(trial));
    const int hw = (1 << (stages - 1)) * uniform_int(rng, 1, 2);
    auto in = make_inputs(cfg, uniform_int(rng, 1, 2), hw, static_cast<std::uint64_t>(trial));
    auto out = forward(m, in.z, in.t, in.ctx);
    EXPECT_EQ(out.eps.shape(), in.z.shape()) << trial;
    EXPECT_EQ(out.taps.size(), 2 * static_cast<std::size_t>(stages) + 1) << trial;
  }
}

TEST(Backward, WholeModelGradientsMatchFiniteDifferences) {
  const auto cfg = small_config(4, 8, 2, 2, 4, 2, 1);
  auto m = build_unet<double>(cfg, 3);
  testing::randomize(m, 11, 0.25);
  Inputs in32 = make_inputs(cfg, 2, 4, 12);
  Tensor<double> z = in32.z.cast<double>();
  Tensor<double> ctx = in32.ctx.cast<double>();
  auto probe = forward(m, z, in32.t, ctx);
  Tensor<double> g = randn<double>(probe.eps.shape(), 13);
  std::vector<std::pair<std::string, Tensor<double>>> gt;
  for (const auto& [id, f] : probe.taps.entries) gt.emplace_back(id, randn<double>(f.shape(), testing::fnv(id)));
  auto loss = [&] {
    auto o = forward(m, z, in32.t, ctx);
    double s = testing::dot(o.eps, g);
    for (const auto& [id, d] : gt) s += testing::dot(*o.taps.find(id), d);
    return s;
  };
  Trace<double> tr;
  forward(m, z, in32.t, ctx, &tr);
  Gradients<double> grads(m);
  Tensor<double> dctx = backward(m, tr, g, gt, grads);
  double worst = 0;
  for (std::size_t i = 0; i < m.parameters().size(); ++i) {
    const double e = testing::fd_max_rel_err(m.parameters()[i].value, grads.values[i], loss, 3, 100 + i, 1e-4, 1e-6);
    EXPECT_LT(e, 1e-3) << m.parameters()[i].name;
    worst = std::max(worst, e);
  }
  EXPECT_LT(worst, 1e-3);
  EXPECT_LT(testing::fd_max_rel_err(ctx, dctx, loss, 8, 7, 1e-4, 1e-6), 1e-3);
}

TEST(Archive, SaveLoadRoundTripIsBitExact) {
  auto m = build_unet<float>(toy_config(), 4);
  testing::randomize(m, 1, 0.5);
  const auto dir = testing::scratch_dir("archive_rt");
  save_weights(m, dir / "m.bkd");
  auto m2 = build_unet<float>(toy_config(), 99);
  load_weights(m2, dir / "m.bkd");
  EXPECT_TRUE(m == m2);
  auto m3 = load_model(read_archive(dir / "m.bkd"));
  EXPECT_TRUE(m == m3);
}

TEST(Archive, OffsetsAreAligned) {
  auto m = build_unet<float>(small_config(), 4);
  const std::string bytes = encode_archive(to_archive(m));
  std::uint64_t len = 0;
  std::memcpy(&len, bytes.data(), 8);
  auto manifest = nlohmann::json::parse(bytes.substr(8, len));
  for (const auto& [name, e] : manifest.items()) {
    if (name == "__metadata__") continue;
    EXPECT_EQ(e["offset"].get<std::uint64_t>() % 64, 0u) << name;
    EXPECT_EQ(e["dtype"], "f32");
  }
}

TEST(Archive, MissingTensorIsNamed) {
  auto m = build_unet<float>(small_config(), 4);
  Archive a = to_archive(m);
  const std::string victim = a.tensors[3].first;
  a.tensors.erase(a.tensors.begin() + 3);
  auto m2 = build_unet<float>(small_config(), 5);
  const auto before = m2;
  try {
    load_weights(m2, a);
    FAIL() << "expected ArchiveError";
  } catch (const ArchiveError& e) {
    EXPECT_NE(std::string(e.what()).find(victim), std::string::npos) << e.what();
  }
  EXPECT_TRUE(m2 == before);
}

TEST(Archive, ShapeMismatchAndUnknownNamesAreAllListed) {
  auto m = build_unet<float>(small_config(), 4);
  Archive a = to_archive(m);
  a.tensors[0].second = Tensor<float>({1, 2, 3});
  a.tensors[5].second = Tensor<float>({7});
  a.tensors.emplace_back("bogus.weight", Tensor<float>({2}));
  try {
    load_weights(m, a);
    FAIL() << "expected ArchiveError";
  } catch (const ArchiveError& e) {
    const std::string msg = e.what();
    EXPECT_NE(msg.find(a.tensors[0].first), std::string::npos);
    EXPECT_NE(msg.find(a.tensors[5].first), std::string::npos);
    EXPECT_NE(msg.find("bogus.weight"), std::string::npos);
  }
}

TEST(Archive, TruncatedPayloadIsRejected) {
  auto m = build_unet<float>(small_config(), 4);
  const std::string bytes = encode_archive(to_archive(m));
  EXPECT_THROW(decode_archive(std::string_view(bytes).substr(0, bytes.size() - 10)), ArchiveError);
  EXPECT_THROW(decode_archive(std::string_view(bytes).substr(0, 5)), ArchiveError);
}

TEST(Archive, TeacherArchiveDoesNotLoadIntoStudentDirectly) {
  const auto teacher = toy_config();
  auto tm = build_unet<float>(teacher, 1);
  auto r = apply_plan(teacher, preset_plan(Preset::Base, teacher));
  auto sm = build_unet<float>(r.student, 2);
  EXPECT_THROW(load_weights(sm, to_archive(tm)), ArchiveError);
}

}  // namespace
}  // namespace bkd
