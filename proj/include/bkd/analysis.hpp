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

#ifndef BKD_ANALYSIS_HPP
#define BKD_ANALYSIS_HPP

#include <atomic>
#include <cmath>
#include <cstdint>
#include <filesystem>
#include <functional>
#include <map>
#include <mutex>
#include <sstream>
#include <string>
#include <thread>
#include <vector>

#include <nlohmann/json.hpp>

#include "bkd/compression.hpp"
#include "bkd/config.hpp"
#include "bkd/diffusion.hpp"
#include "bkd/distill.hpp"
#include "bkd/image.hpp"
#include "bkd/text.hpp"
#include "bkd/unet.hpp"

namespace bkd {

// ---------------------------------------------------------------------------
// Compute accounting

inline constexpr const char* kMacConvention =
    "macs: conv k*k*Cin*Cout*Hout*Wout + linear in*out*tokens (THOP style: no norms, activations, "
    "elementwise ops or attention matmuls); attention_macs: QK^T and AV products, 2*seq_q*seq_k*C per "
    "attention; macs_with_attention = macs + attention_macs";

struct ComputeRow {
  std::string path;  // "stem", "head" or a block path
  std::string kind;
  std::string stage;  // "stem", "down.i", "mid", "up.i", "head"
  std::int64_t params = 0;
  std::int64_t macs = 0;
  std::int64_t attention_macs = 0;
};

struct ComputeReport {
  std::vector<ComputeRow> rows;
  std::vector<ComputeRow> stages;  // per-stage sums, in execution order
  std::int64_t total_params = 0;
  std::int64_t total_macs = 0;  // one step
  std::int64_t attention_macs = 0;
  int latent_h = 0, latent_w = 0;  // 0 when only parameters were counted
  int steps = 1;

  std::int64_t macs_with_attention() const { return total_macs + attention_macs; }
  std::int64_t macs_all_steps() const { return total_macs * steps; }
};

namespace detail {

inline std::int64_t conv_params(std::int64_t k, std::int64_t ci, std::int64_t co) { return k * k * ci * co + co; }
inline std::int64_t linear_params(std::int64_t in, std::int64_t out, bool bias) { return in * out + (bias ? out : 0); }
inline std::int64_t conv_macs(std::int64_t k, std::int64_t ci, std::int64_t co, std::int64_t hw_out) {
  return k * k * ci * co * hw_out;
}

/// Closed-form parameters of one block.
inline std::int64_t block_params(const BlockSpec& b, const UNetConfig& cfg) {
  const std::int64_t ci = b.in_channels, co = b.out_channels, temb = cfg.time_embed_dim, d = cfg.context_dim;
  switch (b.kind) {
    case BlockKind::Residual:
      return 2 * ci + conv_params(3, ci, co) + linear_params(temb, co, true) + 2 * co + conv_params(3, co, co) +
             (ci != co ? conv_params(1, ci, co) : 0);
    case BlockKind::Attention: {
      const std::int64_t c = ci;
      return 2 * c + conv_params(1, c, c) +                                 // norm, proj_in
             2 * c + 3 * linear_params(c, c, false) + linear_params(c, c, true) +  // self-attention
             2 * c + linear_params(c, c, false) + 2 * linear_params(d, c, false) +
             linear_params(c, c, true) +  // cross-attention
             2 * c + linear_params(c, 8 * c, true) + linear_params(4 * c, c, true) +  // GEGLU feed-forward
             conv_params(1, c, c);                                                     // proj_out
    }
    case BlockKind::Downsample:
    case BlockKind::Upsample: return conv_params(3, ci, co);
    case BlockKind::ChannelInterp: return 0;
  }
  return 0;
}

/// (macs, attention_macs) of one block whose convolutions produce hw pixels.
inline std::pair<std::int64_t, std::int64_t> block_macs(const BlockSpec& b, const UNetConfig& cfg, std::int64_t hw) {
  const std::int64_t ci = b.in_channels, co = b.out_channels, temb = cfg.time_embed_dim, d = cfg.context_dim;
  const std::int64_t L = cfg.context_len;
  switch (b.kind) {
    case BlockKind::Residual:
      return {conv_macs(3, ci, co, hw) + temb * co + conv_macs(3, co, co, hw) + (ci != co ? conv_macs(1, ci, co, hw) : 0),
              0};
    case BlockKind::Attention: {
      const std::int64_t c = ci;
      const std::int64_t lin = 2 * conv_macs(1, c, c, hw)  // proj_in, proj_out
                               + 4 * c * c * hw          // self q, k, v, out
                               + 2 * c * c * hw          // cross q, out
                               + 2 * d * c * L           // cross k, v on the context tokens
                               + 8 * c * c * hw + 4 * c * c * hw;  // feed-forward
      return {lin, 2 * hw * hw * c + 2 * hw * L * c};
    }
    case BlockKind::Downsample:
    case BlockKind::Upsample: return {conv_macs(3, ci, co, hw), 0};
    case BlockKind::ChannelInterp: return {0, 0};
  }
  return {0, 0};
}

inline std::string stage_name(const BlockPath& p) {
  if (p.section == Section::Mid) return "mid";
  return std::string(to_string(p.section)) + "." + std::to_string(p.stage);
}

inline ComputeReport account(const UNetConfig& cfg, int h, int w, bool with_macs) {
  validate(cfg);
  const Wiring wiring = walk(cfg);
  if (with_macs) {
    const int f = 1 << wiring.max_level;
    if (h < 1 || w < 1 || h % f || w % f) {
      throw DimensionError("latent " + std::to_string(h) + "x" + std::to_string(w) + " is not divisible by " +
                           std::to_string(f) + " (" + std::to_string(wiring.max_level) + " downsamplings)");
    }
  }
  ComputeReport r;
  r.latent_h = with_macs ? h : 0;
  r.latent_w = with_macs ? w : 0;
  const std::int64_t c0 = cfg.stage_channels.at(0), temb = cfg.time_embed_dim, fdim = cfg.time_freq_dim();
  const std::int64_t full = static_cast<std::int64_t>(h) * w;
  auto at = [&](int level) { return with_macs ? (static_cast<std::int64_t>(h) >> level) * (w >> level) : 0; };

  ComputeRow stem{"stem", "stem", "stem", 0, 0, 0};
  stem.params = conv_params(3, cfg.in_channels, c0) + linear_params(fdim, temb, true) + linear_params(temb, temb, true);
  stem.macs = with_macs ? conv_macs(3, cfg.in_channels, c0, full) + fdim * temb + temb * temb : 0;
  r.rows.push_back(stem);
  for (const auto& st : wiring.steps) {
    const BlockSpec& b = *st.spec;
    ComputeRow row{st.path.str(), std::string(to_string(b.kind)), stage_name(st.path), block_params(b, cfg), 0, 0};
    if (with_macs) {
      int out_level = st.level;
      if (b.kind == BlockKind::Downsample) out_level = st.level + 1;
      if (b.kind == BlockKind::Upsample) out_level = st.level - 1;
      auto [m, a] = block_macs(b, cfg, at(out_level));
      row.macs = m;
      row.attention_macs = a;
    }
    r.rows.push_back(row);
  }
  ComputeRow head{"head", "head", "head", 2 * c0 + conv_params(3, c0, cfg.out_channels), 0, 0};
  head.macs = with_macs ? conv_macs(3, c0, cfg.out_channels, full) : 0;
  r.rows.push_back(head);

  for (const auto& row : r.rows) {
    r.total_params += row.params;
    r.total_macs += row.macs;
    r.attention_macs += row.attention_macs;
    if (r.stages.empty() || r.stages.back().stage != row.stage) {
      r.stages.push_back({row.stage, "stage", row.stage, 0, 0, 0});
    }
    r.stages.back().params += row.params;
    r.stages.back().macs += row.macs;
    r.stages.back().attention_macs += row.attention_macs;
  }
  return r;
}

}  // namespace detail

/// Closed-form parameter totals per block; no model is instantiated.
inline ComputeReport count_params(const UNetConfig& cfg) { return detail::account(cfg, 0, 0, false); }

/// Parameters and one-step MACs at latent resolution h x w.
inline ComputeReport count_macs(const UNetConfig& cfg, int h, int w, int steps = 1) {
  if (steps < 1) throw DomainError("steps must be >= 1");
  ComputeReport r = detail::account(cfg, h, w, true);
  r.steps = steps;
  return r;
}

inline std::string to_csv(const ComputeReport& r) {
  std::ostringstream o;
  o << "# " << kMacConvention << "\n";
  o << "path,kind,stage,params,macs,attention_macs\n";
  for (const auto& row : r.rows) {
    o << row.path << ',' << row.kind << ',' << row.stage << ',' << row.params << ',' << row.macs << ','
      << row.attention_macs << '\n';
  }
  o << "total,,," << r.total_params << ',' << r.total_macs << ',' << r.attention_macs << '\n';
  return o.str();
}

inline nlohmann::json to_json(const ComputeReport& r) {
  auto rows = [](const std::vector<ComputeRow>& v) {
    nlohmann::json a = nlohmann::json::array();
    for (const auto& row : v) {
      a.push_back({{"path", row.path}, {"kind", row.kind}, {"stage", row.stage}, {"params", row.params},
                   {"macs", row.macs}, {"attention_macs", row.attention_macs}});
    }
    return a;
  };
  return {{"convention", kMacConvention},
          {"latent", {r.latent_h, r.latent_w}},
          {"steps", r.steps},
          {"total_params", r.total_params},
          {"macs", r.total_macs},
          {"attention_macs", r.attention_macs},
          {"macs_with_attention", r.macs_with_attention()},
          {"macs_all_steps", r.macs_all_steps()},
          {"stages", rows(r.stages)},
          {"rows", rows(r.rows)}};
}

// ---------------------------------------------------------------------------
// Sensitivity

enum class Granularity { Block, Group };

inline Granularity parse_granularity(std::string_view s) {
  if (s == "block") return Granularity::Block;
  if (s == "group") return Granularity::Group;
  throw ConfigError("granularity: unknown value '" + std::string(s) + "' (expected block|group)");
}

/// One probe: a set of teacher blocks replaced together.
struct ProbeTarget {
  std::string name;
  std::vector<BlockPath> blocks;
};

/// Every removable residual/attention block (Block), or every R / R-A unit of
/// the down and up stages plus the whole mid-stage (Group).
inline std::vector<ProbeTarget> probe_targets(const UNetConfig& cfg, Granularity g) {
  std::vector<ProbeTarget> out;
  auto probeable = [](const BlockSpec& b) {
    return b.removable && (b.kind == BlockKind::Residual || b.kind == BlockKind::Attention);
  };
  auto stages = [&](Section sec, const std::vector<StageSpec>& list) {
    for (std::size_t s = 0; s < list.size(); ++s) {
      const auto& st = list[s];
      for (std::size_t b = 0; b < st.blocks.size(); ++b) {
        const BlockPath p{sec, static_cast<int>(s), static_cast<int>(b)};
        if (g == Granularity::Block) {
          if (probeable(st.blocks[b])) out.push_back({p.str(), {p}});
          continue;
        }
        if (st.blocks[b].kind != BlockKind::Residual || !probeable(st.blocks[b])) continue;
        ProbeTarget t{p.str(), {p}};
        if (b + 1 < st.blocks.size() && st.blocks[b + 1].kind == BlockKind::Attention && probeable(st.blocks[b + 1])) {
          t.blocks.push_back({sec, static_cast<int>(s), static_cast<int>(b + 1)});
          t.name += "+" + t.blocks.back().str();
        }
        out.push_back(std::move(t));
      }
    }
  };
  stages(Section::Down, cfg.down_stages);
  if (g == Granularity::Block) {
    for (std::size_t b = 0; b < cfg.mid.blocks.size(); ++b) {
      if (probeable(cfg.mid.blocks[b])) out.push_back({BlockPath{Section::Mid, 0, static_cast<int>(b)}.str(), {{Section::Mid, 0, static_cast<int>(b)}}});
    }
  } else if (!cfg.mid.blocks.empty()) {
    ProbeTarget t{"mid", {}};
    for (std::size_t b = 0; b < cfg.mid.blocks.size(); ++b) t.blocks.push_back({Section::Mid, 0, static_cast<int>(b)});
    out.push_back(std::move(t));
  }
  stages(Section::Up, cfg.up_stages);
  return out;
}

/// "removal" when every replaced block keeps its width (the substitute is the
/// identity), "channel-interp" otherwise.
inline std::string substitution_kind(const UNetConfig& cfg, const ProbeTarget& t) {
  for (const auto& p : t.blocks) {
    if (cfg.block(p).in_channels != cfg.block(p).out_channels) return "channel-interp";
  }
  return "removal";
}

/// The teacher with `blocks` replaced by parameter-free channel
/// interpolation; remaining weights are inherited.
inline Model<float> probe_variant(const Model<float>& teacher, const std::vector<BlockPath>& blocks) {
  CompressionPlan plan;
  plan.substitutions.insert(blocks.begin(), blocks.end());
  const CompressionResult cr = apply_plan(teacher.config(), plan);
  Model<float> v = build_unet<float>(cr.student, 0);
  inherit_weights(teacher, v, cr.map);
  return v;
}

using MetricFn = std::function<std::map<std::string, double>(const Model<float>&)>;

/// Teacher-output MSE and held-out denoising loss on `eval` (which must
/// carry the teacher's predictions).
inline MetricFn default_metric(const TextEncoder<float>& enc, const EvalSet& eval) {
  return [&enc, &eval](const Model<float>& m) {
    const EvalMetrics em = evaluate(m, enc, eval);
    return std::map<std::string, double>{{"teacher_mse", em.teacher_mse}, {"denoise_loss", em.denoise_loss}};
  };
}

struct SensitivityRow {
  std::string target;
  std::vector<std::string> blocks;
  std::string substitution;
  std::map<std::string, double> scores;
  std::map<std::string, double> delta;
  std::string error;  // non-empty when this probe failed
};

struct SensitivityReport {
  Granularity granularity = Granularity::Block;
  std::map<std::string, double> baseline;
  std::vector<SensitivityRow> rows;

  /// Rows ordered by decreasing delta of `metric` (failed probes last).
  std::vector<SensitivityRow> ranked(const std::string& metric) const {
    auto out = rows;
    std::stable_sort(out.begin(), out.end(), [&](const SensitivityRow& a, const SensitivityRow& b) {
      if (a.error.empty() != b.error.empty()) return a.error.empty();
      auto da = a.delta.count(metric) ? a.delta.at(metric) : 0.0;
      auto db = b.delta.count(metric) ? b.delta.at(metric) : 0.0;
      return da > db;
    });
    return out;
  }
};

/// Probes every target of `granularity`. Each probe builds a private variant;
/// the teacher is only read. Probe failures are recorded per row.
inline SensitivityReport sensitivity_analysis(const Model<float>& teacher, Granularity granularity,
                                              const MetricFn& metric, int threads = 1,
                                              std::vector<ProbeTarget> targets = {}) {
  if (targets.empty()) targets = probe_targets(teacher.config(), granularity);
  SensitivityReport r;
  r.granularity = granularity;
  r.baseline = metric(teacher);
  r.rows.resize(targets.size());
  auto run = [&](std::size_t i) {
    const auto& t = targets[i];
    SensitivityRow& row = r.rows[i];
    row.target = t.name;
    for (const auto& p : t.blocks) row.blocks.push_back(p.str());
    try {
      row.substitution = substitution_kind(teacher.config(), t);
      row.scores = metric(probe_variant(teacher, t.blocks));
      for (const auto& [k, v] : row.scores) row.delta[k] = v - r.baseline.at(k);
    } catch (const std::exception& e) {
      row.error = e.what();
    }
  };
  const int n = std::max(1, std::min<int>(threads, static_cast<int>(targets.size())));
  if (n == 1) {
    for (std::size_t i = 0; i < targets.size(); ++i) run(i);
  } else {
    std::atomic<std::size_t> next{0};
    std::vector<std::thread> pool;
    for (int k = 0; k < n; ++k) {
      pool.emplace_back([&] {
        for (std::size_t i = next++; i < targets.size(); i = next++) run(i);
      });
    }
    for (auto& th : pool) th.join();
  }
  return r;
}

inline std::string to_csv(const SensitivityReport& r) {
  std::vector<std::string> metrics;
  for (const auto& [k, v] : r.baseline) metrics.push_back(k);
  std::ostringstream o;
  o.precision(10);
  o << "target,substitution";
  for (const auto& m : metrics) o << ',' << m << ",delta_" << m;
  o << ",error\n";
  o << "baseline,none";
  for (const auto& m : metrics) o << ',' << r.baseline.at(m) << ",0";
  o << ",\n";
  for (const auto& row : r.rows) {
    o << row.target << ',' << row.substitution;
    for (const auto& m : metrics) {
      if (row.error.empty()) o << ',' << row.scores.at(m) << ',' << row.delta.at(m);
      else o << ",,";
    }
    std::string err = row.error;
    std::replace(err.begin(), err.end(), '\n', ' ');
    std::replace(err.begin(), err.end(), ',', ';');
    o << ',' << err << '\n';
  }
  return o.str();
}

inline nlohmann::json to_json(const SensitivityReport& r) {
  nlohmann::json rows = nlohmann::json::array();
  for (const auto& row : r.rows) {
    nlohmann::json j{{"target", row.target}, {"blocks", row.blocks}, {"substitution", row.substitution},
                     {"scores", row.scores}, {"delta", row.delta}};
    if (!row.error.empty()) j["error"] = row.error;
    rows.push_back(j);
  }
  return {{"granularity", r.granularity == Granularity::Block ? "block" : "group"},
          {"baseline", r.baseline},
          {"rows", rows}};
}

// ---------------------------------------------------------------------------
// Cross-attention attribution

struct AttributionMaps {
  std::vector<std::string> tokens;
  std::vector<Tensor<float>> maps;  // [H, W], normalized by the per-map max
  std::vector<Tensor<float>> raw;   // [H, W], before normalization
  int height = 0, width = 0;
};

namespace detail {

/// Bilinear resize of an [h, w] map (half-pixel centers, edge clamped).
inline Tensor<float> bilinear(const Tensor<float>& m, int oh, int ow) {
  const int h = m.dim(0), w = m.dim(1);
  if (h == oh && w == ow) return m;
  Tensor<float> out({oh, ow});
  for (int y = 0; y < oh; ++y) {
    const double sy = std::clamp((y + 0.5) * h / oh - 0.5, 0.0, h - 1.0);
    const int y0 = static_cast<int>(std::floor(sy)), y1 = std::min(h - 1, y0 + 1);
    const double fy = sy - y0;
    for (int x = 0; x < ow; ++x) {
      const double sx = std::clamp((x + 0.5) * w / ow - 0.5, 0.0, w - 1.0);
      const int x0 = static_cast<int>(std::floor(sx)), x1 = std::min(w - 1, x0 + 1);
      const double fx = sx - x0;
      const double v = (1 - fy) * ((1 - fx) * m[y0 * w + x0] + fx * m[y0 * w + x1]) +
                       fy * ((1 - fx) * m[y1 * w + x0] + fx * m[y1 * w + x1]);
      out[static_cast<std::size_t>(y) * ow + x] = static_cast<float>(v);
    }
  }
  return out;
}

}  // namespace detail

/// Per token position in `positions`: attention averaged over heads, then
/// (after bilinear upsampling to the largest recorded resolution) over all
/// records, i.e. layers and denoising steps. Batch row `row` is used.
inline AttributionMaps aggregate_attention(const AttentionRecorder& rec, const std::vector<int>& positions,
                                           const std::vector<std::string>& words, int row = 0) {
  if (positions.empty()) throw DomainError("attribution: empty prompt");
  if (rec.empty()) throw Error("attribution: no cross-attention was recorded");
  AttributionMaps out;
  out.tokens = words;
  for (const auto& r : rec) {
    if (r.height * r.width > out.height * out.width) {
      out.height = r.height;
      out.width = r.width;
    }
  }
  for (std::size_t k = 0; k < positions.size(); ++k) out.raw.emplace_back(Shape{out.height, out.width});
  for (const auto& r : rec) {
    const int heads = r.probs.dim(1), hw = r.probs.dim(2), L = r.probs.dim(3);
    for (std::size_t k = 0; k < positions.size(); ++k) {
      const int tok = positions[k];
      if (tok < 0 || tok >= L) throw DomainError("attribution: token position out of range");
      Tensor<float> m({r.height, r.width});
      for (int h = 0; h < heads; ++h) {
        const float* p = r.probs.data() + ((static_cast<std::size_t>(row) * heads + h) * hw) * L;
        for (int i = 0; i < hw; ++i) m[static_cast<std::size_t>(i)] += p[static_cast<std::size_t>(i) * L + tok];
      }
      for (auto& v : m.vec()) v /= static_cast<float>(heads);
      out.raw[k] += detail::bilinear(m, out.height, out.width);
    }
  }
  for (auto& m : out.raw) {
    for (auto& v : m.vec()) v /= static_cast<float>(rec.size());
    Tensor<float> n = m;
    const float mx = *std::max_element(n.vec().begin(), n.vec().end());
    if (mx > 0) {
      for (auto& v : n.vec()) v /= mx;
    }
    out.maps.push_back(std::move(n));
  }
  return out;
}

/// Runs the guided sampler on one prompt context and aggregates the
/// conditional branch's cross-attention for the first `n_tokens` positions.
inline AttributionMaps attribution_from_context(const Model<float>& m, const Tensor<float>& cond,
                                                const Tensor<float>& uncond, const std::vector<int>& positions,
                                                const std::vector<std::string>& words, const SamplerConfig& cfg,
                                                const NoiseSchedule& sched, int height, int width) {
  if (positions.empty()) throw DomainError("attribution: empty prompt");
  AttentionRecorder rec;
  sample(m, cond, uncond, cfg, sched, height, width, &rec);
  return aggregate_attention(rec, positions, words);
}

/// Maps for each word of `prompt` (up to the context length).
inline AttributionMaps attribution_maps(const Model<float>& m, const TextEncoder<float>& enc,
                                        const std::string& prompt, const SamplerConfig& cfg,
                                        const NoiseSchedule& sched, int height, int width) {
  auto words = Vocabulary::split(prompt);
  if (words.empty()) throw DomainError("attribution: empty prompt");
  if (static_cast<int>(words.size()) > enc.context_len) words.resize(static_cast<std::size_t>(enc.context_len));
  std::vector<int> positions(words.size());
  for (std::size_t i = 0; i < words.size(); ++i) positions[i] = static_cast<int>(i);
  const auto cond = enc.encode({enc.tokenize(prompt)});
  const auto uncond = enc.encode({enc.null_tokens()});
  return attribution_from_context(m, cond, uncond, positions, words, cfg, sched, height, width);
}

inline double cosine(const Tensor<float>& a, const Tensor<float>& b) {
  a.check_same(b, "cosine");
  double ab = 0, aa = 0, bb = 0;
  for (std::size_t i = 0; i < a.size(); ++i) {
    ab += double(a[i]) * b[i];
    aa += double(a[i]) * a[i];
    bb += double(b[i]) * b[i];
  }
  if (aa == 0 || bb == 0) return aa == bb ? 1.0 : 0.0;
  return ab / std::sqrt(aa * bb);
}

/// Mean per-token cosine similarity of two attribution sets.
inline double map_similarity(const AttributionMaps& a, const AttributionMaps& b) {
  if (a.maps.size() != b.maps.size()) throw DimensionError("map_similarity: token counts differ");
  double s = 0;
  for (std::size_t i = 0; i < a.maps.size(); ++i) s += cosine(a.maps[i], b.maps[i]);
  return s / static_cast<double>(a.maps.size());
}

/// Writes one grayscale PPM (and PNG when available) per token plus index.json.
inline void write_attribution(const std::filesystem::path& dir, const AttributionMaps& a, bool also_png) {
  std::filesystem::create_directories(dir);
  nlohmann::json index = nlohmann::json::array();
  for (std::size_t i = 0; i < a.maps.size(); ++i) {
    char name[32];
    std::snprintf(name, sizeof name, "token_%02zu.ppm", i);
    write_image(dir / name, gray_image(a.maps[i]), also_png);
    float mx = 0;
    for (float v : a.raw[i].vec()) mx = std::max(mx, v);
    index.push_back({{"token", a.tokens[i]}, {"file", name}, {"raw_max", mx}});
  }
  write_file(dir / "index.json",
             nlohmann::json{{"height", a.height}, {"width", a.width}, {"maps", index}}.dump(2) + "\n");
}

}  // namespace bkd

#endif  // BKD_ANALYSIS_HPP
