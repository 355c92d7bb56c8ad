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

#ifndef BKD_CONFIG_HPP
#define BKD_CONFIG_HPP

#include <optional>
#include <string>
#include <string_view>
#include <vector>

#include <nlohmann/json.hpp>

#include "bkd/error.hpp"

namespace bkd {

enum class BlockKind { Residual, Attention, Downsample, Upsample, ChannelInterp };

/// How a block interacts with the skip-connection stack.
enum class SkipRole { None, Push, Pop };

enum class Section { Down, Mid, Up };

inline std::string_view to_string(BlockKind k) {
  switch (k) {
    case BlockKind::Residual: return "residual";
    case BlockKind::Attention: return "attention";
    case BlockKind::Downsample: return "downsample";
    case BlockKind::Upsample: return "upsample";
    case BlockKind::ChannelInterp: return "channel_interp";
  }
  return "?";
}

inline std::string_view to_string(SkipRole r) {
  switch (r) {
    case SkipRole::None: return "none";
    case SkipRole::Push: return "push";
    case SkipRole::Pop: return "pop";
  }
  return "?";
}

inline std::string_view to_string(Section s) {
  switch (s) {
    case Section::Down: return "down";
    case Section::Mid: return "mid";
    case Section::Up: return "up";
  }
  return "?";
}

/// Address of a block: section, stage index within the section, block index
/// within the stage. The mid-stage is always stage 0 of Section::Mid.
struct BlockPath {
  Section section = Section::Down;
  int stage = 0;
  int block = 0;

  std::string str() const {
    return std::string(to_string(section)) + "." + std::to_string(stage) + "." +
           std::to_string(block);
  }
  static BlockPath parse(std::string_view text);

  friend auto operator<=>(const BlockPath&, const BlockPath&) = default;
};

struct BlockSpec {
  BlockKind kind = BlockKind::Residual;
  int in_channels = 0;
  int out_channels = 0;
  bool removable = true;
  SkipRole skip = SkipRole::None;

  friend bool operator==(const BlockSpec&, const BlockSpec&) = default;
};

/// Blocks sharing one spatial resolution. The feature tap is taken after the
/// last non-resampling block.
struct StageSpec {
  std::string tap_id;
  std::vector<BlockSpec> blocks;

  friend bool operator==(const StageSpec&, const StageSpec&) = default;
};

struct UNetConfig {
  std::vector<int> stage_channels;
  std::vector<StageSpec> down_stages;
  StageSpec mid;  // empty block list = no mid-stage
  std::vector<StageSpec> up_stages;
  std::vector<int> attention_heads;  // one entry (shared) or one per stage
  int context_dim = 0;
  int context_len = 0;
  int norm_groups = 32;
  int time_embed_dim = 0;
  int in_channels = 4;
  int out_channels = 4;
  int num_timesteps = 1000;

  int num_stages() const { return static_cast<int>(stage_channels.size()); }
  int heads_at(int level) const {
    if (attention_heads.empty()) return 1;
    return attention_heads.size() == 1 ? attention_heads[0]
                                       : attention_heads.at(static_cast<std::size_t>(level));
  }
  /// Width of the sinusoidal timestep features fed to the embedding MLP.
  int time_freq_dim() const { return time_embed_dim / 4; }

  const StageSpec& stage(Section s, int index) const {
    if (s == Section::Mid) return mid;
    return (s == Section::Down ? down_stages : up_stages).at(static_cast<std::size_t>(index));
  }
  StageSpec& stage(Section s, int index) {
    if (s == Section::Mid) return mid;
    return (s == Section::Down ? down_stages : up_stages).at(static_cast<std::size_t>(index));
  }
  const BlockSpec& block(const BlockPath& p) const {
    return stage(p.section, p.stage).blocks.at(static_cast<std::size_t>(p.block));
  }

  friend bool operator==(const UNetConfig&, const UNetConfig&) = default;
};

inline BlockPath BlockPath::parse(std::string_view text) {
  BlockPath p;
  const auto d1 = text.find('.');
  const auto d2 = text.find('.', d1 == std::string_view::npos ? d1 : d1 + 1);
  if (d1 == std::string_view::npos || d2 == std::string_view::npos) {
    throw ConfigError("malformed block path '" + std::string(text) + "'");
  }
  const auto sec = text.substr(0, d1);
  if (sec == "down") p.section = Section::Down;
  else if (sec == "mid") p.section = Section::Mid;
  else if (sec == "up") p.section = Section::Up;
  else throw ConfigError("unknown section in block path '" + std::string(text) + "'");
  try {
    p.stage = std::stoi(std::string(text.substr(d1 + 1, d2 - d1 - 1)));
    p.block = std::stoi(std::string(text.substr(d2 + 1)));
  } catch (const std::exception&) {
    throw ConfigError("malformed block path '" + std::string(text) + "'");
  }
  return p;
}

// ---------------------------------------------------------------------------
// Wiring walk: resolves the execution order, skip stack, resolution levels
// and channel signatures of a config.

struct ExecStep {
  BlockPath path;
  const BlockSpec* spec = nullptr;
  int level = 0;       // resolution level the block runs at (input side)
  int heads = 1;
  int skip_index = -1; // slot pushed to / popped from
  int skip_channels = 0;
  bool tap_after = false;
  std::string tap_id;
};

struct Wiring {
  std::vector<ExecStep> steps;
  std::vector<int> skip_slot_channels;  // slot 0 is the stem output
  std::vector<int> skip_slot_level;
  std::vector<std::string> tap_order;
  int max_level = 0;
  std::vector<std::string> problems;
  std::optional<BlockPath> first_bad_block;

  bool ok() const { return problems.empty(); }
};

namespace detail {
inline int tap_position(const StageSpec& st) {
  int pos = -1;
  for (std::size_t i = 0; i < st.blocks.size(); ++i) {
    const auto k = st.blocks[i].kind;
    if (k != BlockKind::Downsample && k != BlockKind::Upsample) pos = static_cast<int>(i);
  }
  return pos < 0 ? static_cast<int>(st.blocks.size()) - 1 : pos;
}
}  // namespace detail

inline Wiring walk(const UNetConfig& cfg) {
  Wiring w;
  auto bad = [&](const BlockPath& p, std::string msg) {
    w.problems.push_back("block " + p.str() + ": " + std::move(msg));
    if (!w.first_bad_block) w.first_bad_block = p;
  };
  if (cfg.stage_channels.empty()) {
    w.problems.push_back("stage_channels: must name at least one stage");
    return w;
  }
  int cur = cfg.stage_channels[0];
  int level = 0;
  std::vector<int> stack{0};
  w.skip_slot_channels.push_back(cur);
  w.skip_slot_level.push_back(0);

  auto visit = [&](Section sec, int si, const StageSpec& st) {
    const int tap_pos = detail::tap_position(st);
    for (std::size_t bi = 0; bi < st.blocks.size(); ++bi) {
      const BlockSpec& b = st.blocks[bi];
      ExecStep step;
      step.path = {sec, si, static_cast<int>(bi)};
      step.spec = &b;
      step.level = level;
      step.heads = cfg.heads_at(std::min(level, cfg.num_stages() - 1));
      if (b.in_channels <= 0 || b.out_channels <= 0) bad(step.path, "channel counts must be positive");
      int expected_in = cur;
      if (b.skip == SkipRole::Pop) {
        if (sec != Section::Up) bad(step.path, "only up-stage blocks may consume skips");
        if (stack.empty()) {
          bad(step.path, "skip stack underflow (more consumers than producers)");
        } else {
          step.skip_index = stack.back();
          stack.pop_back();
          step.skip_channels = w.skip_slot_channels[static_cast<std::size_t>(step.skip_index)];
          if (w.skip_slot_level[static_cast<std::size_t>(step.skip_index)] != level) {
            bad(step.path, "consumes a skip produced at a different resolution");
          }
          expected_in += step.skip_channels;
        }
        if (b.kind != BlockKind::Residual && b.kind != BlockKind::ChannelInterp) {
          bad(step.path, "only residual or channel-interp blocks may consume skips");
        }
      }
      if (b.in_channels != expected_in) {
        bad(step.path, "input-channel signature " + std::to_string(b.in_channels) +
                           " does not match incoming " + std::to_string(expected_in));
      }
      switch (b.kind) {
        case BlockKind::Attention:
        case BlockKind::Downsample:
        case BlockKind::Upsample:
          if (b.in_channels != b.out_channels) bad(step.path, "must preserve channel count");
          break;
        default: break;
      }
      if (b.kind == BlockKind::Downsample) {
        if (sec != Section::Down) bad(step.path, "downsample outside a down stage");
        ++level;
      }
      if (b.kind == BlockKind::Upsample) {
        if (sec != Section::Up) bad(step.path, "upsample outside an up stage");
        --level;
        if (level < 0) bad(step.path, "upsampling beyond the input resolution");
      }
      w.max_level = std::max(w.max_level, level);
      cur = b.out_channels;
      if (b.skip == SkipRole::Push) {
        if (sec != Section::Down) bad(step.path, "only down-stage blocks may produce skips");
        const int slot = static_cast<int>(w.skip_slot_channels.size());
        w.skip_slot_channels.push_back(cur);
        w.skip_slot_level.push_back(level);
        stack.push_back(slot);
        step.skip_index = slot;
        step.skip_channels = cur;
      }
      if (static_cast<int>(bi) == tap_pos && !st.tap_id.empty()) {
        step.tap_after = true;
        step.tap_id = st.tap_id;
        w.tap_order.push_back(st.tap_id);
      }
      w.steps.push_back(std::move(step));
    }
  };
  for (std::size_t s = 0; s < cfg.down_stages.size(); ++s) {
    visit(Section::Down, static_cast<int>(s), cfg.down_stages[s]);
  }
  visit(Section::Mid, 0, cfg.mid);
  for (std::size_t s = 0; s < cfg.up_stages.size(); ++s) {
    visit(Section::Up, static_cast<int>(s), cfg.up_stages[s]);
  }
  if (!stack.empty()) {
    w.problems.push_back("skip balance: " + std::to_string(stack.size()) +
                         " skip tensor(s) produced but never consumed");
  }
  if (level != 0) w.problems.push_back("resolution walk ends at level " + std::to_string(level));
  if (cur != cfg.stage_channels[0]) {
    w.problems.push_back("final block width " + std::to_string(cur) +
                         " differs from stage_channels[0]=" + std::to_string(cfg.stage_channels[0]));
  }
  return w;
}

/// Every problem with a config, including wiring problems.
inline std::vector<std::string> config_problems(const UNetConfig& cfg) {
  std::vector<std::string> p;
  const int n = cfg.num_stages();
  if (n == 0) p.push_back("stage_channels: must name at least one stage");
  if (static_cast<int>(cfg.down_stages.size()) != n) {
    p.push_back("blocks_per_down_stage: " + std::to_string(cfg.down_stages.size()) +
                " stages but stage_channels has " + std::to_string(n));
  }
  if (cfg.down_stages.size() != cfg.up_stages.size()) {
    p.push_back("blocks_per_up_stage: down/up stage counts differ (" +
                std::to_string(cfg.down_stages.size()) + " vs " +
                std::to_string(cfg.up_stages.size()) + ")");
  }
  for (std::size_t s = 0; s < cfg.down_stages.size(); ++s) {
    if (cfg.down_stages[s].blocks.empty()) {
      p.push_back("blocks_per_down_stage[" + std::to_string(s) + "]: stage has no blocks");
    }
  }
  for (std::size_t s = 0; s < cfg.up_stages.size(); ++s) {
    if (cfg.up_stages[s].blocks.empty()) {
      p.push_back("blocks_per_up_stage[" + std::to_string(s) + "]: stage has no blocks");
    }
  }
  if (!(cfg.attention_heads.size() == 1 || static_cast<int>(cfg.attention_heads.size()) == n)) {
    p.push_back("attention_heads: expected 1 or " + std::to_string(n) + " entries");
  } else {
    for (int s = 0; s < n; ++s) {
      const int h = cfg.heads_at(s);
      if (h <= 0 || cfg.stage_channels[static_cast<std::size_t>(s)] % h != 0) {
        p.push_back("attention_heads: " + std::to_string(h) + " does not divide stage " +
                    std::to_string(s) + " channels " +
                    std::to_string(cfg.stage_channels[static_cast<std::size_t>(s)]));
      }
    }
  }
  if (cfg.norm_groups <= 0) p.push_back("norm_groups: must be positive");
  if (cfg.context_dim <= 0) p.push_back("context_dim: must be positive");
  if (cfg.context_len <= 0) p.push_back("context_len: must be positive");
  if (cfg.time_embed_dim <= 0 || cfg.time_embed_dim % 8 != 0) {
    p.push_back("time_embed_dim: must be a positive multiple of 8");
  }
  if (cfg.in_channels <= 0) p.push_back("in_channels: must be positive");
  if (cfg.out_channels <= 0) p.push_back("out_channels: must be positive");
  if (cfg.num_timesteps <= 0) p.push_back("num_timesteps: must be positive");
  for (int c : cfg.stage_channels) {
    if (c <= 0) p.push_back("stage_channels: entries must be positive");
  }
  if (!p.empty() && (n == 0 || cfg.norm_groups <= 0)) return p;

  auto check_groups = [&](int c, const std::string& where) {
    if (cfg.norm_groups > 0 && c > 0 && c % cfg.norm_groups != 0) {
      p.push_back("norm_groups: " + std::to_string(cfg.norm_groups) + " does not divide " +
                  std::to_string(c) + " channels at " + where);
    }
  };
  check_groups(cfg.stage_channels[0], "output head");
  const Wiring w = walk(cfg);
  for (const auto& step : w.steps) {
    const auto& b = *step.spec;
    if (b.kind == BlockKind::Residual) {
      check_groups(b.in_channels, "block " + step.path.str() + " input");
      check_groups(b.out_channels, "block " + step.path.str() + " output");
    } else if (b.kind == BlockKind::Attention) {
      check_groups(b.in_channels, "block " + step.path.str());
      if (b.in_channels % step.heads != 0) {
        p.push_back("attention_heads: " + std::to_string(step.heads) + " does not divide " +
                    std::to_string(b.in_channels) + " channels at block " + step.path.str());
      }
    }
  }
  p.insert(p.end(), w.problems.begin(), w.problems.end());
  return p;
}

inline void validate(const UNetConfig& cfg) {
  auto p = config_problems(cfg);
  if (!p.empty()) throw ConfigError(std::move(p));
}

// ---------------------------------------------------------------------------
// Builders

/// Options for the SD-style layout: `layers_per_block` R(-A) units per down
/// stage, one more per up stage, attention where `attention_levels` is set,
/// and an R-A-R mid-stage.
struct SdLayout {
  std::vector<int> stage_channels;
  std::vector<bool> attention_levels;
  int layers_per_block = 2;
  std::vector<int> attention_heads{8};
  int context_dim = 768;
  int context_len = 77;
  int norm_groups = 32;
  int time_embed_dim = 1280;
  int in_channels = 4;
  int out_channels = 4;
  int num_timesteps = 1000;
  bool mid_attention = true;
};

inline UNetConfig build_sd_layout(const SdLayout& o) {
  UNetConfig cfg;
  cfg.stage_channels = o.stage_channels;
  cfg.attention_heads = o.attention_heads;
  cfg.context_dim = o.context_dim;
  cfg.context_len = o.context_len;
  cfg.norm_groups = o.norm_groups;
  cfg.time_embed_dim = o.time_embed_dim;
  cfg.in_channels = o.in_channels;
  cfg.out_channels = o.out_channels;
  cfg.num_timesteps = o.num_timesteps;
  const int n = static_cast<int>(o.stage_channels.size());
  auto attn_at = [&](int level) {
    return level < static_cast<int>(o.attention_levels.size()) &&
           o.attention_levels[static_cast<std::size_t>(level)];
  };
  std::vector<int> skips{o.stage_channels[0]};
  int cur = o.stage_channels[0];
  for (int s = 0; s < n; ++s) {
    const int c = o.stage_channels[static_cast<std::size_t>(s)];
    StageSpec st;
    st.tap_id = "down" + std::to_string(s);
    for (int i = 0; i < o.layers_per_block; ++i) {
      const bool attn = attn_at(s);
      st.blocks.push_back({BlockKind::Residual, cur, c, true, attn ? SkipRole::None : SkipRole::Push});
      cur = c;
      if (attn) st.blocks.push_back({BlockKind::Attention, c, c, true, SkipRole::Push});
      skips.push_back(c);
    }
    if (s < n - 1) {
      st.blocks.push_back({BlockKind::Downsample, c, c, false, SkipRole::Push});
      skips.push_back(c);
    }
    cfg.down_stages.push_back(std::move(st));
  }
  cfg.mid.tap_id = "mid";
  cfg.mid.blocks.push_back({BlockKind::Residual, cur, cur, true, SkipRole::None});
  if (o.mid_attention) cfg.mid.blocks.push_back({BlockKind::Attention, cur, cur, true, SkipRole::None});
  cfg.mid.blocks.push_back({BlockKind::Residual, cur, cur, true, SkipRole::None});
  for (int s = n - 1; s >= 0; --s) {
    const int c = o.stage_channels[static_cast<std::size_t>(s)];
    StageSpec st;
    st.tap_id = "up" + std::to_string(s);
    for (int i = 0; i <= o.layers_per_block; ++i) {
      const int skip = skips.back();
      skips.pop_back();
      st.blocks.push_back({BlockKind::Residual, cur + skip, c, true, SkipRole::Pop});
      cur = c;
      if (attn_at(s)) st.blocks.push_back({BlockKind::Attention, c, c, true, SkipRole::None});
    }
    if (s > 0) st.blocks.push_back({BlockKind::Upsample, c, c, false, SkipRole::None});
    cfg.up_stages.push_back(std::move(st));
  }
  return cfg;
}

/// Full-size SD-v1 U-Net: 8 heads everywhere, 77x768 text context.
inline UNetConfig sdm_v1_config() {
  SdLayout o;
  o.stage_channels = {320, 640, 1280, 1280};
  o.attention_levels = {true, true, true, false};
  return build_sd_layout(o);
}

/// Full-size SD-v2 U-Net: heads [5,10,20,20], 77x1024 text context.
inline UNetConfig sdm_v2_config() {
  SdLayout o;
  o.stage_channels = {320, 640, 1280, 1280};
  o.attention_levels = {true, true, true, false};
  o.attention_heads = {5, 10, 20, 20};
  o.context_dim = 1024;
  return build_sd_layout(o);
}

/// Desk-scale teacher in the same layout: pixel-space RGB, short captions.
inline UNetConfig toy_config() {
  SdLayout o;
  o.stage_channels = {16, 32, 32};
  o.attention_levels = {true, true, false};
  o.attention_heads = {2};
  o.context_dim = 32;
  o.context_len = 8;
  o.norm_groups = 8;
  o.time_embed_dim = 64;
  o.in_channels = 3;
  o.out_channels = 3;
  o.num_timesteps = 200;
  return build_sd_layout(o);
}

// ---------------------------------------------------------------------------
// JSON

inline nlohmann::json to_json(const BlockSpec& b) {
  return {{"kind", to_string(b.kind)},
          {"in_channels", b.in_channels},
          {"out_channels", b.out_channels},
          {"removable", b.removable},
          {"skip", to_string(b.skip)}};
}

inline nlohmann::json to_json(const StageSpec& s) {
  nlohmann::json blocks = nlohmann::json::array();
  for (const auto& b : s.blocks) blocks.push_back(to_json(b));
  return {{"tap_id", s.tap_id}, {"blocks", blocks}};
}

inline nlohmann::json to_json(const UNetConfig& c) {
  nlohmann::json down = nlohmann::json::array(), up = nlohmann::json::array();
  for (const auto& s : c.down_stages) down.push_back(to_json(s));
  for (const auto& s : c.up_stages) up.push_back(to_json(s));
  return {{"stage_channels", c.stage_channels},
          {"blocks_per_down_stage", down},
          {"mid_blocks", to_json(c.mid)},
          {"blocks_per_up_stage", up},
          {"attention_heads", c.attention_heads},
          {"context_dim", c.context_dim},
          {"context_len", c.context_len},
          {"norm_groups", c.norm_groups},
          {"time_embed_dim", c.time_embed_dim},
          {"in_channels", c.in_channels},
          {"out_channels", c.out_channels},
          {"num_timesteps", c.num_timesteps}};
}

namespace detail {

template <typename E>
E parse_enum(const std::string& s, std::initializer_list<E> values, const std::string& field,
             std::vector<std::string>& problems) {
  for (E v : values) {
    if (to_string(v) == s) return v;
  }
  problems.push_back(field + ": unknown value '" + s + "'");
  return *values.begin();
}

inline StageSpec stage_from_json(const nlohmann::json& j, const std::string& field,
                                 std::vector<std::string>& problems) {
  StageSpec s;
  s.tap_id = j.value("tap_id", std::string());
  if (!j.contains("blocks") || !j["blocks"].is_array()) {
    problems.push_back(field + ".blocks: missing or not an array");
    return s;
  }
  for (std::size_t i = 0; i < j["blocks"].size(); ++i) {
    const auto& bj = j["blocks"][i];
    const std::string bf = field + ".blocks[" + std::to_string(i) + "]";
    BlockSpec b;
    try {
      b.kind = parse_enum(bj.at("kind").get<std::string>(),
                          {BlockKind::Residual, BlockKind::Attention, BlockKind::Downsample,
                           BlockKind::Upsample, BlockKind::ChannelInterp},
                          bf + ".kind", problems);
      b.in_channels = bj.at("in_channels").get<int>();
      b.out_channels = bj.at("out_channels").get<int>();
      b.removable = bj.value("removable", true);
      b.skip = parse_enum(bj.value("skip", std::string("none")),
                          {SkipRole::None, SkipRole::Push, SkipRole::Pop}, bf + ".skip", problems);
    } catch (const nlohmann::json::exception& e) {
      problems.push_back(bf + ": " + e.what());
    }
    s.blocks.push_back(b);
  }
  return s;
}

}  // namespace detail

/// Parses a config. Accepts either explicit block lists or a `layout`
/// shorthand ({layers_per_block, attention_levels}). Validation problems are
/// all reported together.
inline UNetConfig config_from_json(const nlohmann::json& j) {
  std::vector<std::string> problems;
  auto get_int = [&](const char* key, int fallback) {
    if (!j.contains(key)) return fallback;
    if (!j[key].is_number_integer()) {
      problems.push_back(std::string(key) + ": must be an integer");
      return fallback;
    }
    return j[key].get<int>();
  };
  UNetConfig c;
  if (j.contains("stage_channels") && j["stage_channels"].is_array()) {
    c.stage_channels = j["stage_channels"].get<std::vector<int>>();
  } else {
    problems.push_back("stage_channels: missing or not an array");
  }
  if (j.contains("attention_heads")) {
    if (j["attention_heads"].is_number_integer()) {
      c.attention_heads = {j["attention_heads"].get<int>()};
    } else if (j["attention_heads"].is_array()) {
      c.attention_heads = j["attention_heads"].get<std::vector<int>>();
    } else {
      problems.push_back("attention_heads: must be an integer or an array");
    }
  } else {
    c.attention_heads = {8};
  }
  c.context_dim = get_int("context_dim", 0);
  c.context_len = get_int("context_len", 0);
  c.norm_groups = get_int("norm_groups", 32);
  c.time_embed_dim = get_int("time_embed_dim", 0);
  c.in_channels = get_int("in_channels", 4);
  c.out_channels = get_int("out_channels", 4);
  c.num_timesteps = get_int("num_timesteps", 1000);

  if (j.contains("layout")) {
    const auto& l = j["layout"];
    SdLayout o;
    o.stage_channels = c.stage_channels;
    o.attention_levels = l.value("attention_levels", std::vector<bool>(c.stage_channels.size(), true));
    o.layers_per_block = l.value("layers_per_block", 2);
    o.mid_attention = l.value("mid_attention", true);
    o.attention_heads = c.attention_heads;
    o.context_dim = c.context_dim;
    o.context_len = c.context_len;
    o.norm_groups = c.norm_groups;
    o.time_embed_dim = c.time_embed_dim;
    o.in_channels = c.in_channels;
    o.out_channels = c.out_channels;
    o.num_timesteps = c.num_timesteps;
    if (!problems.empty()) throw ConfigError(problems);
    if (o.stage_channels.empty()) throw ConfigError("stage_channels: must name at least one stage");
    c = build_sd_layout(o);
  } else {
    auto stages = [&](const char* key, std::vector<StageSpec>& out) {
      if (!j.contains(key) || !j[key].is_array()) {
        problems.push_back(std::string(key) + ": missing or not an array");
        return;
      }
      for (std::size_t i = 0; i < j[key].size(); ++i) {
        out.push_back(detail::stage_from_json(j[key][i], std::string(key) + "[" + std::to_string(i) + "]",
                                              problems));
      }
    };
    stages("blocks_per_down_stage", c.down_stages);
    stages("blocks_per_up_stage", c.up_stages);
    if (j.contains("mid_blocks")) c.mid = detail::stage_from_json(j["mid_blocks"], "mid_blocks", problems);
  }
  if (!problems.empty()) throw ConfigError(problems);
  validate(c);
  return c;
}

}  // namespace bkd

#endif  // BKD_CONFIG_HPP
