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

#ifndef BKD_COMPRESSION_HPP
#define BKD_COMPRESSION_HPP

#include <map>
#include <optional>
#include <set>
#include <string>
#include <utility>
#include <vector>

#include <nlohmann/json.hpp>

#include "bkd/archive.hpp"
#include "bkd/config.hpp"
#include "bkd/unet.hpp"

namespace bkd {

enum class Preset { Base, Small, Tiny };

inline std::string_view to_string(Preset p) {
  switch (p) {
    case Preset::Base: return "base";
    case Preset::Small: return "small";
    case Preset::Tiny: return "tiny";
  }
  return "?";
}

inline Preset parse_preset(std::string_view s) {
  if (s == "base") return Preset::Base;
  if (s == "small") return Preset::Small;
  if (s == "tiny") return Preset::Tiny;
  throw ConfigError("preset: unknown value '" + std::string(s) + "' (expected base|small|tiny)");
}

struct CompressionPlan {
  std::set<BlockPath> removals;
  bool remove_mid_stage = false;
  bool remove_innermost_stages = false;
  std::set<BlockPath> substitutions;  // -> ChannelInterp
  std::optional<Preset> preset;

  bool empty() const {
    return removals.empty() && substitutions.empty() && !remove_mid_stage && !remove_innermost_stages;
  }
};

/// (teacher parameter name -> student parameter name), covering every
/// student parameter.
struct InheritanceMap {
  std::vector<std::pair<std::string, std::string>> pairs;
};

struct CompressionResult {
  UNetConfig student;
  InheritanceMap map;
  /// origin[i][j] = teacher path of student down/mid/up block; keyed by student path.
  std::map<BlockPath, BlockPath> origin;
};

// ---------------------------------------------------------------------------

namespace detail {

/// Splits a stage into R / R-A units; returns unit start indices, or nullopt
/// when the stage does not follow that pattern. `resample` reports whether a
/// trailing Downsample/Upsample is present.
inline std::optional<std::vector<int>> stage_units(const StageSpec& st, bool& resample) {
  std::vector<int> starts;
  resample = false;
  std::size_t i = 0;
  while (i < st.blocks.size()) {
    const auto k = st.blocks[i].kind;
    if (k == BlockKind::Residual) {
      starts.push_back(static_cast<int>(i));
      ++i;
      if (i < st.blocks.size() && st.blocks[i].kind == BlockKind::Attention) ++i;
    } else if ((k == BlockKind::Downsample || k == BlockKind::Upsample) && i + 1 == st.blocks.size()) {
      resample = true;
      ++i;
    } else {
      return std::nullopt;
    }
  }
  return starts;
}

inline int unit_end(const StageSpec& st, int start) {
  int e = start + 1;
  if (e < static_cast<int>(st.blocks.size()) && st.blocks[static_cast<std::size_t>(e)].kind == BlockKind::Attention) ++e;
  return e;
}

}  // namespace detail

/// Named presets for SD-style teachers (two R(-A) units per down stage,
/// three per up stage):
///   Base  drops the second unit of every down stage and the second unit of
///         every up stage (keeping the first and third);
///   Small is Base plus mid-stage removal;
///   Tiny  is Small plus removal of the innermost down/up stages.
inline CompressionPlan preset_plan(Preset preset, const UNetConfig& teacher) {
  const int n = teacher.num_stages();
  auto fail = [](const std::string& why) -> void {
    throw PlanError("teacher does not follow the paired-down / triplet-up stage pattern: " + why);
  };
  if (n < 1 || teacher.down_stages.size() != teacher.up_stages.size()) fail("stage counts");
  CompressionPlan plan;
  plan.preset = preset;
  for (int s = 0; s < static_cast<int>(teacher.down_stages.size()); ++s) {
    bool resample = false;
    const auto& st = teacher.down_stages[static_cast<std::size_t>(s)];
    auto units = detail::stage_units(st, resample);
    if (!units || units->size() != 2) fail("down stage " + std::to_string(s) + " is not a pair of units");
    if (resample != (s < n - 1)) fail("down stage " + std::to_string(s) + " downsample placement");
    for (int b = (*units)[1]; b < detail::unit_end(st, (*units)[1]); ++b) {
      plan.removals.insert({Section::Down, s, b});
    }
  }
  for (int s = 0; s < static_cast<int>(teacher.up_stages.size()); ++s) {
    bool resample = false;
    const auto& st = teacher.up_stages[static_cast<std::size_t>(s)];
    auto units = detail::stage_units(st, resample);
    if (!units || units->size() != 3) fail("up stage " + std::to_string(s) + " is not a triplet of units");
    if (resample != (s < n - 1)) fail("up stage " + std::to_string(s) + " upsample placement");
    for (int b = (*units)[1]; b < detail::unit_end(st, (*units)[1]); ++b) {
      plan.removals.insert({Section::Up, s, b});
    }
  }
  if (preset == Preset::Small || preset == Preset::Tiny) {
    if (teacher.mid.blocks.empty()) fail("no mid-stage to remove");
    plan.remove_mid_stage = true;
  }
  if (preset == Preset::Tiny) {
    if (n < 2) fail("innermost-stage removal needs at least two stages");
    plan.remove_innermost_stages = true;
  }
  return plan;
}

inline void check_plan(const UNetConfig& teacher, const CompressionPlan& plan) {
  std::vector<std::string> problems;
  auto exists = [&](const BlockPath& p) {
    if (p.section == Section::Mid) return p.stage == 0 && p.block >= 0 && p.block < static_cast<int>(teacher.mid.blocks.size());
    const auto& list = p.section == Section::Down ? teacher.down_stages : teacher.up_stages;
    return p.stage >= 0 && p.stage < static_cast<int>(list.size()) && p.block >= 0 &&
           p.block < static_cast<int>(list[static_cast<std::size_t>(p.stage)].blocks.size());
  };
  for (const auto& p : plan.removals) {
    if (!exists(p)) problems.push_back("removal " + p.str() + " does not exist");
    else if (!teacher.block(p).removable) problems.push_back("removal " + p.str() + " is not removable");
  }
  for (const auto& p : plan.substitutions) {
    if (!exists(p)) problems.push_back("substitution " + p.str() + " does not exist");
    else if (plan.removals.count(p)) problems.push_back("block " + p.str() + " is both removed and substituted");
  }
  if (plan.remove_innermost_stages && !plan.remove_mid_stage) {
    problems.push_back("innermost-stage removal requires mid-stage removal");
  }
  if (plan.remove_innermost_stages && teacher.num_stages() < 2) {
    problems.push_back("innermost-stage removal needs at least two stages");
  }
  if (!problems.empty()) {
    std::string msg = "invalid plan:";
    for (const auto& p : problems) msg += "\n  - " + p;
    throw PlanError(msg);
  }
}

/// Builds the student config and the teacher->student inheritance map.
inline CompressionResult apply_plan(const UNetConfig& teacher, const CompressionPlan& plan) {
  check_plan(teacher, plan);
  const int n = teacher.num_stages();
  CompressionResult r;
  UNetConfig& s = r.student;
  s = teacher;
  s.down_stages.clear();
  s.up_stages.clear();
  s.mid = StageSpec{};

  auto compress_stage = [&](Section sec, int ts, const StageSpec& st, int ss, StageSpec& out) {
    out.tap_id = st.tap_id;
    std::vector<bool> kept(st.blocks.size(), true);
    std::vector<SkipRole> role(st.blocks.size());
    for (std::size_t b = 0; b < st.blocks.size(); ++b) {
      role[b] = st.blocks[b].skip;
      kept[b] = plan.removals.count({sec, ts, static_cast<int>(b)}) == 0;
    }
    for (std::size_t b = 0; b < st.blocks.size(); ++b) {
      if (kept[b] || role[b] != SkipRole::Push || b == 0) continue;
      if (kept[b - 1] && role[b - 1] == SkipRole::None) role[b - 1] = SkipRole::Push;
    }
    for (std::size_t b = 0; b < st.blocks.size(); ++b) {
      if (!kept[b]) continue;
      BlockSpec spec = st.blocks[b];
      spec.skip = role[b];
      const BlockPath tp{sec, ts, static_cast<int>(b)};
      if (plan.substitutions.count(tp)) spec.kind = BlockKind::ChannelInterp;
      const BlockPath sp{sec, ss, static_cast<int>(out.blocks.size())};
      r.origin[sp] = tp;
      out.blocks.push_back(spec);
    }
  };

  const int keep_stages = plan.remove_innermost_stages ? n - 1 : n;
  for (int ts = 0; ts < keep_stages; ++ts) {
    StageSpec st;
    compress_stage(Section::Down, ts, teacher.down_stages[static_cast<std::size_t>(ts)], ts, st);
    s.down_stages.push_back(std::move(st));
  }
  if (plan.remove_innermost_stages) {
    auto& last = s.down_stages.back();
    if (!last.blocks.empty() && last.blocks.back().kind == BlockKind::Downsample) {
      last.blocks.pop_back();
      r.origin.erase({Section::Down, keep_stages - 1, static_cast<int>(last.blocks.size())});
    }
    s.stage_channels.pop_back();
    if (s.attention_heads.size() > 1) s.attention_heads.pop_back();
  }
  if (!plan.remove_mid_stage) compress_stage(Section::Mid, 0, teacher.mid, 0, s.mid);
  const int first_up = plan.remove_innermost_stages ? 1 : 0;
  for (int ts = first_up; ts < n; ++ts) {
    StageSpec st;
    compress_stage(Section::Up, ts, teacher.up_stages[static_cast<std::size_t>(ts)], ts - first_up, st);
    s.up_stages.push_back(std::move(st));
  }

  for (std::size_t i = 0; i < s.down_stages.size(); ++i) {
    if (s.down_stages[i].blocks.empty()) {
      throw StructuralError("plan empties down stage " + std::to_string(i));
    }
  }
  for (std::size_t i = 0; i < s.up_stages.size(); ++i) {
    if (s.up_stages[i].blocks.empty()) {
      throw StructuralError("plan empties up stage " + std::to_string(i + first_up));
    }
  }
  const Wiring w = walk(s);
  if (!w.ok()) {
    std::string msg = "plan breaks the U-Net wiring";
    if (w.first_bad_block) {
      auto it = r.origin.find(*w.first_bad_block);
      msg += " at block " + (it != r.origin.end() ? it->second.str() : w.first_bad_block->str()) +
             " (student " + w.first_bad_block->str() + ")";
    }
    for (const auto& p : w.problems) msg += "\n  - " + p;
    throw StructuralError(msg);
  }
  validate(s);

  // Stem/head parameters are shared by name; block parameters follow origin.
  const auto decls = detail::declare_parameters(s);
  for (const auto& d : decls) {
    std::string teacher_name = d.name;
    const auto dot1 = d.name.find('.');
    const auto head = d.name.substr(0, dot1);
    if (head == "down" || head == "mid" || head == "up") {
      const auto dot3 = d.name.find('.', d.name.find('.', dot1 + 1) + 1);
      const BlockPath sp = BlockPath::parse(d.name.substr(0, dot3));
      teacher_name = r.origin.at(sp).str() + d.name.substr(dot3);
    }
    r.map.pairs.emplace_back(teacher_name, d.name);
  }
  return r;
}

/// Replaces a channel-changing block with a parameter-free channel resampler.
inline UNetConfig substitute_channel_interp(const UNetConfig& teacher, const BlockPath& path) {
  const BlockSpec& b = teacher.block(path);
  if (b.in_channels == b.out_channels) {
    throw PlanError("block " + path.str() +
                    " keeps its channel count; remove it instead of substituting channel interpolation");
  }
  UNetConfig out = teacher;
  BlockSpec& nb = out.stage(path.section, path.stage).blocks.at(static_cast<std::size_t>(path.block));
  nb.kind = BlockKind::ChannelInterp;
  validate(out);
  return out;
}

/// Copies every mapped teacher tensor into the student.
template <typename T>
void inherit_weights(const Model<T>& teacher, Model<T>& student, const InheritanceMap& map) {
  std::vector<bool> covered(student.parameters().size(), false);
  std::vector<std::string> problems;
  for (const auto& [tn, sn] : map.pairs) {
    if (!teacher.has(tn)) {
      problems.push_back("teacher has no parameter '" + tn + "'");
      continue;
    }
    if (!student.has(sn)) {
      problems.push_back("student has no parameter '" + sn + "'");
      continue;
    }
    const auto& tv = teacher.param(tn);
    if (tv.shape() != student.param(sn).shape()) {
      problems.push_back("shape mismatch " + tn + " " + shape_str(tv.shape()) + " -> " + sn + " " +
                         shape_str(student.param(sn).shape()));
      continue;
    }
    covered[student.index_of(sn)] = true;
  }
  for (std::size_t i = 0; i < covered.size(); ++i) {
    if (!covered[i]) problems.push_back("student parameter '" + student.parameters()[i].name + "' is not mapped");
  }
  if (!problems.empty()) {
    std::string msg = "inheritance failed:";
    for (const auto& p : problems) msg += "\n  - " + p;
    throw InheritanceError(msg);
  }
  for (const auto& [tn, sn] : map.pairs) student.param(sn) = teacher.param(tn);
}

/// Teacher tensors that no student parameter inherits.
template <typename T>
Archive removed_weights(const Model<T>& teacher, const InheritanceMap& map) {
  std::set<std::string> used;
  for (const auto& pr : map.pairs) used.insert(pr.first);
  Archive a;
  for (const auto& p : teacher.parameters()) {
    if (!used.count(p.name)) a.tensors.emplace_back(p.name, p.value.template cast<float>());
  }
  return a;
}

/// Rebuilds a teacher-shaped model from a student plus the weights of the
/// blocks the plan removed.
template <typename T>
Model<T> reassemble(const Model<T>& student, const UNetConfig& teacher_config,
                    const InheritanceMap& map, const Archive& removed) {
  Model<T> out = build_unet<T>(teacher_config, 0);
  Archive merged = removed;
  for (const auto& [tn, sn] : map.pairs) merged.tensors.emplace_back(tn, student.param(sn).template cast<float>());
  load_weights(out, merged);
  return out;
}

// ---------------------------------------------------------------------------
// JSON

inline nlohmann::json to_json(const CompressionPlan& p) {
  nlohmann::json j;
  j["preset"] = p.preset ? nlohmann::json(std::string(to_string(*p.preset))) : nlohmann::json();
  j["removals"] = nlohmann::json::array();
  for (const auto& b : p.removals) j["removals"].push_back(b.str());
  j["remove_mid_stage"] = p.remove_mid_stage;
  j["remove_innermost_stages"] = p.remove_innermost_stages;
  j["substitutions"] = nlohmann::json::array();
  for (const auto& b : p.substitutions) j["substitutions"].push_back(b.str());
  return j;
}

/// A plan document either names a preset (expanded against `teacher`) or lists
/// removals explicitly.
inline CompressionPlan plan_from_json(const nlohmann::json& j, const UNetConfig& teacher) {
  CompressionPlan p;
  if (j.contains("preset") && j["preset"].is_string()) {
    p = preset_plan(parse_preset(j["preset"].get<std::string>()), teacher);
  }
  for (const auto& s : j.value("removals", std::vector<std::string>{})) p.removals.insert(BlockPath::parse(s));
  for (const auto& s : j.value("substitutions", std::vector<std::string>{})) p.substitutions.insert(BlockPath::parse(s));
  p.remove_mid_stage = p.remove_mid_stage || j.value("remove_mid_stage", false);
  p.remove_innermost_stages = p.remove_innermost_stages || j.value("remove_innermost_stages", false);
  return p;
}

}  // namespace bkd

#endif  // BKD_COMPRESSION_HPP
