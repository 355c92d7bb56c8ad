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

#ifndef BKD_UNET_HPP
#define BKD_UNET_HPP

#include <cstdint>
#include <functional>
#include <optional>
#include <span>
#include <string>
#include <unordered_map>
#include <utility>
#include <variant>
#include <vector>

#include "bkd/config.hpp"
#include "bkd/ops.hpp"
#include "bkd/rng.hpp"
#include "bkd/tensor.hpp"

namespace bkd {

template <typename T>
struct Parameter {
  std::string name;
  Tensor<T> value;
};

/// Ordered (tap_id, feature map) pairs, outer-down -> mid -> outer-up.
template <typename T>
struct FeatureTapSet {
  std::vector<std::pair<std::string, Tensor<T>>> entries;

  std::size_t size() const { return entries.size(); }
  const Tensor<T>* find(std::string_view id) const {
    for (const auto& [k, v] : entries) {
      if (k == id) return &v;
    }
    return nullptr;
  }
};

/// Cross-attention probabilities of one attention block during one forward.
struct CrossAttentionRecord {
  BlockPath path;
  int height = 0;
  int width = 0;
  Tensor<float> probs;  // [B, heads, H*W, context_len]
};

using AttentionRecorder = std::vector<CrossAttentionRecord>;

namespace detail {

inline std::uint64_t fnv1a(std::string_view s) {
  std::uint64_t h = 0xcbf29ce484222325ull;
  for (unsigned char c : s) {
    h ^= c;
    h *= 0x100000001b3ull;
  }
  return h;
}

struct ParamDecl {
  std::string name;
  Shape shape;
  enum class Init { Uniform, Ones, Zeros, ZeroWeight } init = Init::Uniform;
  int fan_in = 1;
};

inline void declare_block(const std::string& prefix, const BlockSpec& b, const UNetConfig& cfg,
                          std::vector<ParamDecl>& out) {
  using I = ParamDecl::Init;
  auto norm = [&](const std::string& n, int c) {
    out.push_back({prefix + n + ".weight", {c}, I::Ones, 1});
    out.push_back({prefix + n + ".bias", {c}, I::Zeros, 1});
  };
  auto conv = [&](const std::string& n, int ci, int co, int k, I winit = I::Uniform) {
    out.push_back({prefix + n + ".weight", {co, ci, k, k}, winit, ci * k * k});
    out.push_back({prefix + n + ".bias", {co}, winit == I::ZeroWeight ? I::Zeros : I::Uniform, ci * k * k});
  };
  auto lin = [&](const std::string& n, int in, int o, bool bias) {
    out.push_back({prefix + n + ".weight", {o, in}, I::Uniform, in});
    if (bias) out.push_back({prefix + n + ".bias", {o}, I::Uniform, in});
  };
  const int ci = b.in_channels, co = b.out_channels;
  switch (b.kind) {
    case BlockKind::Residual:
      norm("norm1", ci);
      conv("conv1", ci, co, 3);
      lin("time_proj", cfg.time_embed_dim, co, true);
      norm("norm2", co);
      conv("conv2", co, co, 3, I::ZeroWeight);
      if (ci != co) conv("shortcut", ci, co, 1);
      break;
    case BlockKind::Attention: {
      const int c = ci, d = cfg.context_dim;
      norm("norm", c);
      conv("proj_in", c, c, 1);
      norm("ln1", c);
      lin("attn1.to_q", c, c, false);
      lin("attn1.to_k", c, c, false);
      lin("attn1.to_v", c, c, false);
      lin("attn1.to_out", c, c, true);
      norm("ln2", c);
      lin("attn2.to_q", c, c, false);
      lin("attn2.to_k", d, c, false);
      lin("attn2.to_v", d, c, false);
      lin("attn2.to_out", c, c, true);
      norm("ln3", c);
      lin("ff.proj", c, 8 * c, true);
      lin("ff.out", 4 * c, c, true);
      conv("proj_out", c, c, 1, I::ZeroWeight);
      break;
    }
    case BlockKind::Downsample:
    case BlockKind::Upsample:
      conv("conv", ci, co, 3);
      break;
    case BlockKind::ChannelInterp:
      break;
  }
}

inline std::vector<ParamDecl> declare_parameters(const UNetConfig& cfg) {
  using I = ParamDecl::Init;
  std::vector<ParamDecl> out;
  const int c0 = cfg.stage_channels.at(0);
  const int f = cfg.time_freq_dim();
  out.push_back({"conv_in.weight", {c0, cfg.in_channels, 3, 3}, I::Uniform, cfg.in_channels * 9});
  out.push_back({"conv_in.bias", {c0}, I::Uniform, cfg.in_channels * 9});
  out.push_back({"time_embed.linear1.weight", {cfg.time_embed_dim, f}, I::Uniform, f});
  out.push_back({"time_embed.linear1.bias", {cfg.time_embed_dim}, I::Uniform, f});
  out.push_back({"time_embed.linear2.weight", {cfg.time_embed_dim, cfg.time_embed_dim}, I::Uniform,
                 cfg.time_embed_dim});
  out.push_back({"time_embed.linear2.bias", {cfg.time_embed_dim}, I::Uniform, cfg.time_embed_dim});
  auto stages = [&](Section sec, const std::vector<StageSpec>& list) {
    for (std::size_t s = 0; s < list.size(); ++s) {
      for (std::size_t b = 0; b < list[s].blocks.size(); ++b) {
        BlockPath p{sec, static_cast<int>(s), static_cast<int>(b)};
        declare_block(p.str() + ".", list[s].blocks[b], cfg, out);
      }
    }
  };
  stages(Section::Down, cfg.down_stages);
  for (std::size_t b = 0; b < cfg.mid.blocks.size(); ++b) {
    BlockPath p{Section::Mid, 0, static_cast<int>(b)};
    declare_block(p.str() + ".", cfg.mid.blocks[b], cfg, out);
  }
  stages(Section::Up, cfg.up_stages);
  out.push_back({"norm_out.weight", {c0}, I::Ones, 1});
  out.push_back({"norm_out.bias", {c0}, I::Zeros, 1});
  out.push_back({"conv_out.weight", {cfg.out_channels, c0, 3, 3}, I::Uniform, c0 * 9});
  out.push_back({"conv_out.bias", {cfg.out_channels}, I::Uniform, c0 * 9});
  return out;
}

}  // namespace detail

/// Conditional U-Net predicting noise residuals. Parameters are addressed as
/// "<section>.<stage>.<block>.<sub-layer>.<weight|bias>" plus stem/head names.
/// Immutable during forward; concurrent forwards on one model are safe.
template <typename T>
class Model {
 public:
  Model() = default;

  const UNetConfig& config() const noexcept { return config_; }
  const Wiring& wiring() const noexcept { return wiring_; }
  const std::vector<Parameter<T>>& parameters() const noexcept { return params_; }
  std::vector<Parameter<T>>& parameters() noexcept { return params_; }

  std::size_t num_parameters() const {
    std::size_t n = 0;
    for (const auto& p : params_) n += p.value.size();
    return n;
  }

  bool has(std::string_view name) const { return index_.count(std::string(name)) != 0; }
  std::size_t index_of(std::string_view name) const {
    auto it = index_.find(std::string(name));
    if (it == index_.end()) throw Error("unknown parameter '" + std::string(name) + "'");
    return it->second;
  }
  const Tensor<T>& param(std::string_view name) const { return params_[index_of(name)].value; }
  Tensor<T>& param(std::string_view name) { return params_[index_of(name)].value; }

  template <typename U>
  Model<U> cast() const {
    Model<U> m;
    m.config_ = config_;
    m.wiring_ = walk(m.config_);
    m.index_ = index_;
    for (const auto& p : params_) m.params_.push_back({p.name, p.value.template cast<U>()});
    return m;
  }

  Model(const Model& o) : config_(o.config_), params_(o.params_), index_(o.index_) {
    wiring_ = walk(config_);
  }
  Model& operator=(const Model& o) {
    if (this != &o) {
      config_ = o.config_;
      params_ = o.params_;
      index_ = o.index_;
      wiring_ = walk(config_);
    }
    return *this;
  }
  // The wiring points into config_, so it is rebuilt rather than moved.
  Model(Model&& o) noexcept
      : config_(std::move(o.config_)), params_(std::move(o.params_)), index_(std::move(o.index_)) {
    wiring_ = walk(config_);
  }
  Model& operator=(Model&& o) noexcept {
    if (this != &o) {
      config_ = std::move(o.config_);
      params_ = std::move(o.params_);
      index_ = std::move(o.index_);
      wiring_ = walk(config_);
    }
    return *this;
  }

  friend bool operator==(const Model& a, const Model& b) {
    if (!(a.config_ == b.config_) || a.params_.size() != b.params_.size()) return false;
    for (std::size_t i = 0; i < a.params_.size(); ++i) {
      if (a.params_[i].name != b.params_[i].name || !(a.params_[i].value == b.params_[i].value)) {
        return false;
      }
    }
    return true;
  }

  template <typename U>
  friend Model<U> build_unet(const UNetConfig& config, std::uint64_t seed);
  template <typename U>
  friend class Model;

 private:
  UNetConfig config_;
  Wiring wiring_;
  std::vector<Parameter<T>> params_;
  std::unordered_map<std::string, std::size_t> index_;
};

/// Validates `config` and initializes parameters deterministically: each
/// tensor draws from a stream keyed by (seed, parameter name), so a block's
/// initial weights do not depend on which other blocks exist.
template <typename T>
Model<T> build_unet(const UNetConfig& config, std::uint64_t seed) {
  validate(config);
  Model<T> m;
  m.config_ = config;
  m.wiring_ = walk(m.config_);
  for (const auto& d : detail::declare_parameters(config)) {
    Tensor<T> t(d.shape);
    using I = detail::ParamDecl::Init;
    switch (d.init) {
      case I::Ones: t.fill(T(1)); break;
      case I::Zeros:
      case I::ZeroWeight: break;
      case I::Uniform: {
        Rng rng(derive_seed(seed, {detail::fnv1a(d.name)}));
        const double bound = 1.0 / std::sqrt(static_cast<double>(d.fan_in));
        std::uniform_real_distribution<double> dist(-bound, bound);
        for (auto& v : t.vec()) v = static_cast<T>(dist(rng));
        break;
      }
    }
    m.index_[d.name] = m.params_.size();
    m.params_.push_back({d.name, std::move(t)});
  }
  return m;
}

/// Parameter gradients aligned with Model::parameters().
template <typename T>
struct Gradients {
  std::vector<Tensor<T>> values;

  explicit Gradients(const Model<T>& m) {
    for (const auto& p : m.parameters()) values.emplace_back(p.value.shape());
  }
  void zero() {
    for (auto& v : values) v.fill(T(0));
  }
};

// ---------------------------------------------------------------------------
// Forward caches

namespace detail {

template <typename T>
struct ResCache {
  Tensor<T> x;
  ops::NormStats n1, n2;
  Tensor<T> g1, a1, h2, g2, a2;
};

template <typename T>
struct AttnCache {
  Tensor<T> x;
  ops::NormStats n0, s1, s2, s3;
  Tensor<T> g0;
  Tensor<T> t0, l1, q1, k1, v1, p1, o1;
  Tensor<T> t1, l2, q2, k2, v2, p2, o2;
  Tensor<T> t2, l3, f1, f2;
  Tensor<T> u;
};

template <typename T>
struct ConvCache {
  Tensor<T> x;  // conv input (after upsampling for Upsample blocks)
};

template <typename T>
struct InterpCache {
  int in_channels = 0;
};

template <typename T>
using BlockCache = std::variant<ResCache<T>, AttnCache<T>, ConvCache<T>, InterpCache<T>>;

}  // namespace detail

/// Everything backward() needs from one forward pass.
template <typename T>
struct Trace {
  Tensor<T> input;
  Tensor<T> context;
  Tensor<T> freq, e1, s1, emb, emb_act;
  std::vector<detail::BlockCache<T>> blocks;
  std::vector<int> concat_split;  // channels of the running tensor before a skip concat
  Tensor<T> head_in, head_g;
  ops::NormStats head_stats;
  Tensor<T> head_a;
};

template <typename T>
struct ForwardOutput {
  Tensor<T> eps;
  FeatureTapSet<T> taps;
};

struct ForwardOptions {
  AttentionRecorder* recorder = nullptr;
};

namespace detail {

template <typename T>
Tensor<T> residual_forward(const Model<T>& m, const std::string& pre, const BlockSpec& b,
                           const Tensor<T>& x, const Tensor<T>& emb_act, ResCache<T>* c) {
  const int groups = m.config().norm_groups;
  ResCache<T> local;
  ResCache<T>& k = c ? *c : local;
  ops::NormStats n1, n2;
  Tensor<T> g1 = ops::group_norm(x, groups, m.param(pre + "norm1.weight"), m.param(pre + "norm1.bias"), &n1);
  Tensor<T> a1 = ops::silu(g1);
  Tensor<T> h2 = ops::conv2d(a1, m.param(pre + "conv1.weight"), m.param(pre + "conv1.bias"), {3, 1, 1});
  const Tensor<T>& tb = m.param(pre + "time_proj.bias");
  Tensor<T> tp = ops::linear(emb_act, m.param(pre + "time_proj.weight"), &tb);
  const int batch = h2.dim(0), co = h2.dim(1);
  const std::size_t hw = static_cast<std::size_t>(h2.dim(2)) * h2.dim(3);
  for (int n = 0; n < batch; ++n)
    for (int ch = 0; ch < co; ++ch) {
      T* p = h2.data() + (static_cast<std::size_t>(n) * co + ch) * hw;
      const T add = tp[static_cast<std::size_t>(n) * co + ch];
      for (std::size_t i = 0; i < hw; ++i) p[i] += add;
    }
  Tensor<T> g2 = ops::group_norm(h2, groups, m.param(pre + "norm2.weight"), m.param(pre + "norm2.bias"), &n2);
  Tensor<T> a2 = ops::silu(g2);
  Tensor<T> y = ops::conv2d(a2, m.param(pre + "conv2.weight"), m.param(pre + "conv2.bias"), {3, 1, 1});
  if (b.in_channels != b.out_channels) {
    y += ops::conv2d(x, m.param(pre + "shortcut.weight"), m.param(pre + "shortcut.bias"), {1, 1, 0});
  } else {
    y += x;
  }
  if (c) {
    k.x = x;
    k.n1 = std::move(n1);
    k.n2 = std::move(n2);
    k.g1 = std::move(g1);
    k.a1 = std::move(a1);
    k.h2 = std::move(h2);
    k.g2 = std::move(g2);
    k.a2 = std::move(a2);
  }
  return y;
}

template <typename T>
struct GradSink {
  const Model<T>& m;
  Gradients<T>& g;
  Tensor<T>& operator()(const std::string& name) { return g.values[m.index_of(name)]; }
};

template <typename T>
Tensor<T> residual_backward(const Model<T>& m, const std::string& pre, const BlockSpec& b,
                            const ResCache<T>& c, const Tensor<T>& emb_act, const Tensor<T>& dy,
                            GradSink<T>& gs, Tensor<T>& demb_act) {
  const int groups = m.config().norm_groups;
  Tensor<T> dx;
  if (b.in_channels != b.out_channels) {
    dx = ops::conv2d_backward(c.x, m.param(pre + "shortcut.weight"), {1, 1, 0}, dy,
                              gs(pre + "shortcut.weight"), gs(pre + "shortcut.bias"));
  } else {
    dx = dy;
  }
  Tensor<T> da2 = ops::conv2d_backward(c.a2, m.param(pre + "conv2.weight"), {3, 1, 1}, dy,
                                       gs(pre + "conv2.weight"), gs(pre + "conv2.bias"));
  Tensor<T> dg2 = ops::silu_backward(c.g2, da2);
  Tensor<T> dh2 = ops::group_norm_backward(c.h2, groups, m.param(pre + "norm2.weight"), c.n2, dg2,
                                           gs(pre + "norm2.weight"), gs(pre + "norm2.bias"));
  const int batch = dh2.dim(0), co = dh2.dim(1);
  const std::size_t hw = static_cast<std::size_t>(dh2.dim(2)) * dh2.dim(3);
  Tensor<T> dtp({batch, co});
  for (int n = 0; n < batch; ++n)
    for (int ch = 0; ch < co; ++ch) {
      const T* p = dh2.data() + (static_cast<std::size_t>(n) * co + ch) * hw;
      T s = T(0);
      for (std::size_t i = 0; i < hw; ++i) s += p[i];
      dtp[static_cast<std::size_t>(n) * co + ch] = s;
    }
  demb_act += ops::linear_backward(emb_act, m.param(pre + "time_proj.weight"), dtp,
                                   gs(pre + "time_proj.weight"), &gs(pre + "time_proj.bias"));
  Tensor<T> da1 = ops::conv2d_backward(c.a1, m.param(pre + "conv1.weight"), {3, 1, 1}, dh2,
                                       gs(pre + "conv1.weight"), gs(pre + "conv1.bias"));
  Tensor<T> dg1 = ops::silu_backward(c.g1, da1);
  dx += ops::group_norm_backward(c.x, groups, m.param(pre + "norm1.weight"), c.n1, dg1,
                                 gs(pre + "norm1.weight"), gs(pre + "norm1.bias"));
  return dx;
}

template <typename T>
Tensor<T> attention_forward(const Model<T>& m, const std::string& pre, int heads,
                            const BlockPath& path, const Tensor<T>& x, const Tensor<T>& ctx,
                            AttnCache<T>* c, AttentionRecorder* recorder) {
  const int groups = m.config().norm_groups;
  const int h = x.dim(2), w = x.dim(3);
  AttnCache<T> k;
  k.g0 = ops::group_norm(x, groups, m.param(pre + "norm.weight"), m.param(pre + "norm.bias"), &k.n0);
  k.t0 = ops::to_tokens(ops::conv2d(k.g0, m.param(pre + "proj_in.weight"), m.param(pre + "proj_in.bias"), {1, 1, 0}));

  k.l1 = ops::layer_norm(k.t0, m.param(pre + "ln1.weight"), m.param(pre + "ln1.bias"), &k.s1);
  k.q1 = ops::linear(k.l1, m.param(pre + "attn1.to_q.weight"), static_cast<const Tensor<T>*>(nullptr));
  k.k1 = ops::linear(k.l1, m.param(pre + "attn1.to_k.weight"), static_cast<const Tensor<T>*>(nullptr));
  k.v1 = ops::linear(k.l1, m.param(pre + "attn1.to_v.weight"), static_cast<const Tensor<T>*>(nullptr));
  k.o1 = ops::attention(k.q1, k.k1, k.v1, heads, k.p1);
  const Tensor<T>& b1 = m.param(pre + "attn1.to_out.bias");
  k.t1 = k.t0 + ops::linear(k.o1, m.param(pre + "attn1.to_out.weight"), &b1);

  k.l2 = ops::layer_norm(k.t1, m.param(pre + "ln2.weight"), m.param(pre + "ln2.bias"), &k.s2);
  k.q2 = ops::linear(k.l2, m.param(pre + "attn2.to_q.weight"), static_cast<const Tensor<T>*>(nullptr));
  k.k2 = ops::linear(ctx, m.param(pre + "attn2.to_k.weight"), static_cast<const Tensor<T>*>(nullptr));
  k.v2 = ops::linear(ctx, m.param(pre + "attn2.to_v.weight"), static_cast<const Tensor<T>*>(nullptr));
  k.o2 = ops::attention(k.q2, k.k2, k.v2, heads, k.p2);
  if (recorder) recorder->push_back({path, h, w, k.p2.template cast<float>()});
  const Tensor<T>& b2 = m.param(pre + "attn2.to_out.bias");
  k.t2 = k.t1 + ops::linear(k.o2, m.param(pre + "attn2.to_out.weight"), &b2);

  k.l3 = ops::layer_norm(k.t2, m.param(pre + "ln3.weight"), m.param(pre + "ln3.bias"), &k.s3);
  const Tensor<T>& fb = m.param(pre + "ff.proj.bias");
  k.f1 = ops::linear(k.l3, m.param(pre + "ff.proj.weight"), &fb);
  k.f2 = ops::geglu(k.f1);
  const Tensor<T>& ob = m.param(pre + "ff.out.bias");
  Tensor<T> t3 = k.t2 + ops::linear(k.f2, m.param(pre + "ff.out.weight"), &ob);

  k.u = ops::from_tokens(t3, h, w);
  Tensor<T> y = ops::conv2d(k.u, m.param(pre + "proj_out.weight"), m.param(pre + "proj_out.bias"), {1, 1, 0});
  y += x;
  if (c) {
    k.x = x;
    *c = std::move(k);
  }
  return y;
}

template <typename T>
Tensor<T> attention_backward(const Model<T>& m, const std::string& pre, int heads,
                             const AttnCache<T>& c, const Tensor<T>& ctx, const Tensor<T>& dy,
                             GradSink<T>& gs, Tensor<T>& dctx) {
  const int groups = m.config().norm_groups;
  Tensor<T> dx = dy;
  Tensor<T> du = ops::conv2d_backward(c.u, m.param(pre + "proj_out.weight"), {1, 1, 0}, dy,
                                      gs(pre + "proj_out.weight"), gs(pre + "proj_out.bias"));
  Tensor<T> dt = ops::to_tokens(du);  // d t3

  // feed-forward
  Tensor<T> df2 = ops::linear_backward(c.f2, m.param(pre + "ff.out.weight"), dt,
                                       gs(pre + "ff.out.weight"), &gs(pre + "ff.out.bias"));
  Tensor<T> df1 = ops::geglu_backward(c.f1, df2);
  Tensor<T> dl3 = ops::linear_backward(c.l3, m.param(pre + "ff.proj.weight"), df1,
                                       gs(pre + "ff.proj.weight"), &gs(pre + "ff.proj.bias"));
  dt += ops::layer_norm_backward(c.t2, m.param(pre + "ln3.weight"), c.s3, dl3,
                                 gs(pre + "ln3.weight"), gs(pre + "ln3.bias"));

  // cross-attention
  Tensor<T> do2 = ops::linear_backward(c.o2, m.param(pre + "attn2.to_out.weight"), dt,
                                       gs(pre + "attn2.to_out.weight"), &gs(pre + "attn2.to_out.bias"));
  Tensor<T> dq2, dk2, dv2;
  ops::attention_backward(c.q2, c.k2, c.v2, heads, c.p2, do2, dq2, dk2, dv2);
  Tensor<T> dl2 = ops::linear_backward(c.l2, m.param(pre + "attn2.to_q.weight"), dq2,
                                       gs(pre + "attn2.to_q.weight"), static_cast<Tensor<T>*>(nullptr));
  dctx += ops::linear_backward(ctx, m.param(pre + "attn2.to_k.weight"), dk2,
                               gs(pre + "attn2.to_k.weight"), static_cast<Tensor<T>*>(nullptr));
  dctx += ops::linear_backward(ctx, m.param(pre + "attn2.to_v.weight"), dv2,
                               gs(pre + "attn2.to_v.weight"), static_cast<Tensor<T>*>(nullptr));
  dt += ops::layer_norm_backward(c.t1, m.param(pre + "ln2.weight"), c.s2, dl2,
                                 gs(pre + "ln2.weight"), gs(pre + "ln2.bias"));

  // self-attention
  Tensor<T> do1 = ops::linear_backward(c.o1, m.param(pre + "attn1.to_out.weight"), dt,
                                       gs(pre + "attn1.to_out.weight"), &gs(pre + "attn1.to_out.bias"));
  Tensor<T> dq1, dk1, dv1;
  ops::attention_backward(c.q1, c.k1, c.v1, heads, c.p1, do1, dq1, dk1, dv1);
  Tensor<T> dl1 = ops::linear_backward(c.l1, m.param(pre + "attn1.to_q.weight"), dq1,
                                       gs(pre + "attn1.to_q.weight"), static_cast<Tensor<T>*>(nullptr));
  dl1 += ops::linear_backward(c.l1, m.param(pre + "attn1.to_k.weight"), dk1,
                              gs(pre + "attn1.to_k.weight"), static_cast<Tensor<T>*>(nullptr));
  dl1 += ops::linear_backward(c.l1, m.param(pre + "attn1.to_v.weight"), dv1,
                              gs(pre + "attn1.to_v.weight"), static_cast<Tensor<T>*>(nullptr));
  dt += ops::layer_norm_backward(c.t0, m.param(pre + "ln1.weight"), c.s1, dl1,
                                 gs(pre + "ln1.weight"), gs(pre + "ln1.bias"));

  Tensor<T> dp = ops::from_tokens(dt, c.x.dim(2), c.x.dim(3));
  Tensor<T> dg0 = ops::conv2d_backward(c.g0, m.param(pre + "proj_in.weight"), {1, 1, 0}, dp,
                                       gs(pre + "proj_in.weight"), gs(pre + "proj_in.bias"));
  dx += ops::group_norm_backward(c.x, groups, m.param(pre + "norm.weight"), c.n0, dg0,
                                 gs(pre + "norm.weight"), gs(pre + "norm.bias"));
  return dx;
}

}  // namespace detail

template <typename T>
Tensor<T> stack_context(std::span<const Tensor<T>> embeddings) {
  std::vector<Tensor<T>> parts;
  for (const auto& e : embeddings) parts.push_back(e.reshaped({1, e.dim(0), e.dim(1)}));
  return concat_batch(parts);
}

/// Noise prediction for latents z_t [B,C,H,W] at timesteps t (each in [1,T])
/// under text context [B,L,D]. Returns eps with z_t's shape and the stage
/// feature taps.
template <typename T>
ForwardOutput<T> forward(const Model<T>& m, const Tensor<T>& z_t, std::span<const int> timesteps,
                         const Tensor<T>& context, Trace<T>* trace = nullptr,
                         const ForwardOptions& opts = {}) {
  const UNetConfig& cfg = m.config();
  if (z_t.rank() != 4 || z_t.dim(1) != cfg.in_channels) {
    throw DimensionError("forward: latent " + shape_str(z_t.shape()) + " but model expects " +
                         std::to_string(cfg.in_channels) + " channels");
  }
  const int batch = z_t.dim(0);
  const int div = 1 << m.wiring().max_level;
  if (z_t.dim(2) % div != 0 || z_t.dim(3) % div != 0) {
    throw DimensionError("forward: spatial size " + shape_str(z_t.shape()) +
                         " not divisible by " + std::to_string(div));
  }
  if (static_cast<int>(timesteps.size()) != batch) {
    throw DimensionError("forward: " + std::to_string(timesteps.size()) + " timesteps for batch " +
                         std::to_string(batch));
  }
  for (int t : timesteps) {
    if (t < 1 || t > cfg.num_timesteps) {
      throw DomainError("forward: timestep " + std::to_string(t) + " outside [1, " +
                        std::to_string(cfg.num_timesteps) + "]");
    }
  }
  if (context.rank() != 3 || context.dim(0) != batch || context.dim(1) != cfg.context_len ||
      context.dim(2) != cfg.context_dim) {
    throw DimensionError("forward: context " + shape_str(context.shape()) + " expected [" +
                         std::to_string(batch) + "," + std::to_string(cfg.context_len) + "," +
                         std::to_string(cfg.context_dim) + "]");
  }

  Tensor<T> freq = ops::timestep_features<T>(timesteps, cfg.time_freq_dim());
  const Tensor<T>& tb1 = m.param("time_embed.linear1.bias");
  const Tensor<T>& tb2 = m.param("time_embed.linear2.bias");
  Tensor<T> e1 = ops::linear(freq, m.param("time_embed.linear1.weight"), &tb1);
  Tensor<T> s1 = ops::silu(e1);
  Tensor<T> emb = ops::linear(s1, m.param("time_embed.linear2.weight"), &tb2);
  Tensor<T> emb_act = ops::silu(emb);

  Tensor<T> h = ops::conv2d(z_t, m.param("conv_in.weight"), m.param("conv_in.bias"), {3, 1, 1});
  const Wiring& w = m.wiring();
  std::vector<Tensor<T>> skips(w.skip_slot_channels.size());
  skips[0] = h;
  ForwardOutput<T> out;
  if (trace) {
    trace->input = z_t;
    trace->context = context;
    trace->blocks.clear();
    trace->concat_split.clear();
  }
  for (const ExecStep& step : w.steps) {
    const BlockSpec& b = *step.spec;
    const std::string pre = step.path.str() + ".";
    if (b.skip == SkipRole::Pop) {
      if (trace) trace->concat_split.push_back(h.dim(1));
      h = ops::concat_channels(h, skips[static_cast<std::size_t>(step.skip_index)]);
    }
    switch (b.kind) {
      case BlockKind::Residual: {
        detail::ResCache<T> c;
        h = detail::residual_forward(m, pre, b, h, emb_act, trace ? &c : nullptr);
        if (trace) trace->blocks.emplace_back(std::move(c));
        break;
      }
      case BlockKind::Attention: {
        detail::AttnCache<T> c;
        h = detail::attention_forward(m, pre, step.heads, step.path, h, context,
                                      trace ? &c : nullptr, opts.recorder);
        if (trace) trace->blocks.emplace_back(std::move(c));
        break;
      }
      case BlockKind::Downsample: {
        if (trace) trace->blocks.emplace_back(detail::ConvCache<T>{h});
        h = ops::conv2d(h, m.param(pre + "conv.weight"), m.param(pre + "conv.bias"), {3, 2, 1});
        break;
      }
      case BlockKind::Upsample: {
        Tensor<T> up = ops::upsample_nearest2x(h);
        h = ops::conv2d(up, m.param(pre + "conv.weight"), m.param(pre + "conv.bias"), {3, 1, 1});
        if (trace) trace->blocks.emplace_back(detail::ConvCache<T>{std::move(up)});
        break;
      }
      case BlockKind::ChannelInterp: {
        if (trace) trace->blocks.emplace_back(detail::InterpCache<T>{h.dim(1)});
        h = ops::channel_interp(h, b.out_channels);
        break;
      }
    }
    if (b.skip == SkipRole::Push) skips[static_cast<std::size_t>(step.skip_index)] = h;
    if (step.tap_after) out.taps.entries.emplace_back(step.tap_id, h);
  }
  ops::NormStats hs;
  Tensor<T> g = ops::group_norm(h, cfg.norm_groups, m.param("norm_out.weight"), m.param("norm_out.bias"), &hs);
  Tensor<T> a = ops::silu(g);
  out.eps = ops::conv2d(a, m.param("conv_out.weight"), m.param("conv_out.bias"), {3, 1, 1});
  if (trace) {
    trace->freq = std::move(freq);
    trace->e1 = std::move(e1);
    trace->s1 = std::move(s1);
    trace->emb = std::move(emb);
    trace->emb_act = std::move(emb_act);
    trace->head_in = std::move(h);
    trace->head_g = std::move(g);
    trace->head_stats = std::move(hs);
    trace->head_a = std::move(a);
  }
  return out;
}

/// Backpropagates d(loss)/d(eps) and per-tap d(loss)/d(feature) through the
/// traced forward, accumulating into `grads`. Returns d(loss)/d(context).
template <typename T>
Tensor<T> backward(const Model<T>& m, const Trace<T>& tr, const Tensor<T>& d_eps,
                   const std::vector<std::pair<std::string, Tensor<T>>>& d_taps,
                   Gradients<T>& grads) {
  const UNetConfig& cfg = m.config();
  detail::GradSink<T> gs{m, grads};
  Tensor<T> da = ops::conv2d_backward(tr.head_a, m.param("conv_out.weight"), {3, 1, 1}, d_eps,
                                      gs("conv_out.weight"), gs("conv_out.bias"));
  Tensor<T> dg = ops::silu_backward(tr.head_g, da);
  Tensor<T> dh = ops::group_norm_backward(tr.head_in, cfg.norm_groups, m.param("norm_out.weight"),
                                          tr.head_stats, dg, gs("norm_out.weight"), gs("norm_out.bias"));
  Tensor<T> demb_act(tr.emb_act.shape());
  Tensor<T> dctx(tr.context.shape());
  const Wiring& w = m.wiring();
  std::vector<Tensor<T>> dskips(w.skip_slot_channels.size());
  int split_pos = static_cast<int>(tr.concat_split.size());
  for (int i = static_cast<int>(w.steps.size()) - 1; i >= 0; --i) {
    const ExecStep& step = w.steps[static_cast<std::size_t>(i)];
    const BlockSpec& b = *step.spec;
    const std::string pre = step.path.str() + ".";
    if (step.tap_after) {
      for (const auto& [id, d] : d_taps) {
        if (id == step.tap_id) dh += d;
      }
    }
    if (b.skip == SkipRole::Push) {
      auto& ds = dskips[static_cast<std::size_t>(step.skip_index)];
      if (!ds.empty()) dh += ds;
    }
    const auto& cache = tr.blocks[static_cast<std::size_t>(i)];
    switch (b.kind) {
      case BlockKind::Residual:
        dh = detail::residual_backward(m, pre, b, std::get<detail::ResCache<T>>(cache), tr.emb_act,
                                       dh, gs, demb_act);
        break;
      case BlockKind::Attention:
        dh = detail::attention_backward(m, pre, step.heads, std::get<detail::AttnCache<T>>(cache),
                                        tr.context, dh, gs, dctx);
        break;
      case BlockKind::Downsample:
        dh = ops::conv2d_backward(std::get<detail::ConvCache<T>>(cache).x, m.param(pre + "conv.weight"),
                                  {3, 2, 1}, dh, gs(pre + "conv.weight"), gs(pre + "conv.bias"));
        break;
      case BlockKind::Upsample: {
        Tensor<T> dup = ops::conv2d_backward(std::get<detail::ConvCache<T>>(cache).x,
                                             m.param(pre + "conv.weight"), {3, 1, 1}, dh,
                                             gs(pre + "conv.weight"), gs(pre + "conv.bias"));
        dh = ops::upsample_nearest2x_backward(dup);
        break;
      }
      case BlockKind::ChannelInterp:
        dh = ops::channel_interp_backward(dh, std::get<detail::InterpCache<T>>(cache).in_channels);
        break;
    }
    if (b.skip == SkipRole::Pop) {
      const int c1 = tr.concat_split[static_cast<std::size_t>(--split_pos)];
      Tensor<T> dprev, dskip;
      ops::split_channels(dh, c1, dprev, dskip);
      dskips[static_cast<std::size_t>(step.skip_index)] = std::move(dskip);
      dh = std::move(dprev);
    }
  }
  if (!dskips[0].empty()) dh += dskips[0];
  ops::conv2d_backward(tr.input, m.param("conv_in.weight"), {3, 1, 1}, dh, gs("conv_in.weight"),
                       gs("conv_in.bias"), false);
  Tensor<T> demb = ops::silu_backward(tr.emb, demb_act);
  Tensor<T> ds1 = ops::linear_backward(tr.s1, m.param("time_embed.linear2.weight"), demb,
                                       gs("time_embed.linear2.weight"), &gs("time_embed.linear2.bias"));
  Tensor<T> de1 = ops::silu_backward(tr.e1, ds1);
  ops::linear_backward(tr.freq, m.param("time_embed.linear1.weight"), de1,
                       gs("time_embed.linear1.weight"), &gs("time_embed.linear1.bias"));
  return dctx;
}

}  // namespace bkd

#endif  // BKD_UNET_HPP
