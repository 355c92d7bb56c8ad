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

#ifndef BKD_DISTILL_HPP
#define BKD_DISTILL_HPP

#include <chrono>
#include <cmath>
#include <filesystem>
#include <functional>
#include <limits>
#include <optional>
#include <sstream>
#include <string>
#include <vector>

#include <nlohmann/json.hpp>

#include "bkd/archive.hpp"
#include "bkd/compression.hpp"
#include "bkd/data.hpp"
#include "bkd/diffusion.hpp"
#include "bkd/optim.hpp"
#include "bkd/text.hpp"
#include "bkd/unet.hpp"

namespace bkd {

enum class InitMode { Teacher, Random };

inline std::string_view to_string(InitMode m) { return m == InitMode::Teacher ? "teacher" : "random"; }

inline InitMode parse_init_mode(std::string_view s) {
  if (s == "teacher") return InitMode::Teacher;
  if (s == "random") return InitMode::Random;
  throw ConfigError("init_mode: unknown value '" + std::string(s) + "' (expected teacher|random)");
}

struct TrainConfig {
  int batch_size = 8;
  int grad_accum_steps = 4;
  int iterations = 1000;
  double learning_rate = 5e-5;
  double weight_decay = 0.01;
  LossWeights loss_weights;
  InitMode init_mode = InitMode::Teacher;
  bool kd_enabled = true;
  int eval_every = 100;
  int eval_size = 64;
  double cond_dropout = 0.1;
  std::uint64_t seed = 0;
};

inline std::vector<std::string> train_config_problems(const TrainConfig& c) {
  std::vector<std::string> p;
  if (c.batch_size < 1) p.push_back("batch_size: must be positive");
  if (c.grad_accum_steps < 1) p.push_back("grad_accum_steps: must be positive");
  if (c.iterations < 0) p.push_back("iterations: must be nonnegative");
  if (!(c.learning_rate > 0)) p.push_back("learning_rate: must be positive");
  if (!(c.weight_decay >= 0)) p.push_back("weight_decay: must be nonnegative");
  if (c.loss_weights.lambda_out < 0) p.push_back("loss_weights.lambda_out: must be nonnegative");
  if (c.loss_weights.lambda_feat < 0) p.push_back("loss_weights.lambda_feat: must be nonnegative");
  if (c.eval_every < 1) p.push_back("eval_every: must be positive");
  if (c.eval_size < 1) p.push_back("eval_size: must be positive");
  if (!(c.cond_dropout >= 0 && c.cond_dropout <= 1)) p.push_back("cond_dropout: must lie in [0, 1]");
  return p;
}

inline void validate(const TrainConfig& c) {
  auto p = train_config_problems(c);
  if (!p.empty()) throw ConfigError(p);
}

inline nlohmann::json to_json(const TrainConfig& c) {
  return {{"batch_size", c.batch_size},
          {"grad_accum_steps", c.grad_accum_steps},
          {"iterations", c.iterations},
          {"learning_rate", c.learning_rate},
          {"weight_decay", c.weight_decay},
          {"loss_weights", {{"lambda_out", c.loss_weights.lambda_out}, {"lambda_feat", c.loss_weights.lambda_feat}}},
          {"init_mode", to_string(c.init_mode)},
          {"kd_enabled", c.kd_enabled},
          {"eval_every", c.eval_every},
          {"eval_size", c.eval_size},
          {"cond_dropout", c.cond_dropout},
          {"seed", c.seed}};
}

/// Missing keys keep their defaults; every bad field is reported.
inline TrainConfig train_config_from_json(const nlohmann::json& j) {
  TrainConfig c;
  std::vector<std::string> problems;
  auto get = [&](const nlohmann::json& obj, const char* key, auto& dst, const std::string& field) {
    if (!obj.contains(key)) return;
    try {
      obj.at(key).get_to(dst);
    } catch (const nlohmann::json::exception&) {
      problems.push_back(field + ": wrong type");
    }
  };
  get(j, "batch_size", c.batch_size, "batch_size");
  get(j, "grad_accum_steps", c.grad_accum_steps, "grad_accum_steps");
  get(j, "iterations", c.iterations, "iterations");
  get(j, "learning_rate", c.learning_rate, "learning_rate");
  get(j, "weight_decay", c.weight_decay, "weight_decay");
  if (j.contains("loss_weights")) {
    get(j["loss_weights"], "lambda_out", c.loss_weights.lambda_out, "loss_weights.lambda_out");
    get(j["loss_weights"], "lambda_feat", c.loss_weights.lambda_feat, "loss_weights.lambda_feat");
  }
  if (j.contains("init_mode")) {
    try {
      c.init_mode = parse_init_mode(j["init_mode"].get<std::string>());
    } catch (const std::exception& e) {
      problems.push_back(std::string("init_mode: ") + (j["init_mode"].is_string() ? "unknown value" : "wrong type"));
    }
  }
  get(j, "kd_enabled", c.kd_enabled, "kd_enabled");
  get(j, "eval_every", c.eval_every, "eval_every");
  get(j, "eval_size", c.eval_size, "eval_size");
  get(j, "cond_dropout", c.cond_dropout, "cond_dropout");
  get(j, "seed", c.seed, "seed");
  for (auto& p : train_config_problems(c)) problems.push_back(std::move(p));
  if (!problems.empty()) throw ConfigError(problems);
  return c;
}

// ---------------------------------------------------------------------------
// Logs

/// One evaluation point. Training-loss columns hold the breakdown of the
/// update at `iteration` (for iteration 0, of a probe batch before any
/// update). eval_teacher_mse is NaN when there is no teacher.
struct TrainRecord {
  int iteration = 0;
  double task = 0, out_kd = 0, feat_kd = 0, total = 0;
  double eval_teacher_mse = std::numeric_limits<double>::quiet_NaN();
  double eval_denoise_loss = 0;
  double wall_time = 0;
};

struct TrainLog {
  std::vector<TrainRecord> records;

  std::string to_csv() const {
    std::ostringstream o;
    o.precision(10);
    o << "iteration,task,out_kd,feat_kd,total,eval_teacher_mse,eval_denoise_loss,wall_time\n";
    for (const auto& r : records) {
      o << r.iteration << ',' << r.task << ',' << r.out_kd << ',' << r.feat_kd << ',' << r.total << ',';
      if (!std::isnan(r.eval_teacher_mse)) o << r.eval_teacher_mse;
      o << ',' << r.eval_denoise_loss << ',' << r.wall_time << '\n';
    }
    return o.str();
  }

  nlohmann::json to_json() const {
    nlohmann::json a = nlohmann::json::array();
    for (const auto& r : records) {
      a.push_back({{"iteration", r.iteration},
                   {"task", r.task},
                   {"out_kd", r.out_kd},
                   {"feat_kd", r.feat_kd},
                   {"total", r.total},
                   {"eval_teacher_mse", std::isnan(r.eval_teacher_mse) ? nlohmann::json() : nlohmann::json(r.eval_teacher_mse)},
                   {"eval_denoise_loss", r.eval_denoise_loss},
                   {"wall_time", r.wall_time}});
    }
    return a;
  }

  static TrainLog from_json(const nlohmann::json& j) {
    TrainLog log;
    for (const auto& e : j) {
      TrainRecord r;
      r.iteration = e.at("iteration").get<int>();
      r.task = e.at("task").get<double>();
      r.out_kd = e.at("out_kd").get<double>();
      r.feat_kd = e.at("feat_kd").get<double>();
      r.total = e.at("total").get<double>();
      if (!e.at("eval_teacher_mse").is_null()) r.eval_teacher_mse = e["eval_teacher_mse"].get<double>();
      r.eval_denoise_loss = e.at("eval_denoise_loss").get<double>();
      r.wall_time = e.at("wall_time").get<double>();
      log.records.push_back(r);
    }
    return log;
  }

  const TrainRecord& last() const { return records.back(); }
};

// ---------------------------------------------------------------------------
// Batches

struct Batch {
  Tensor<float> z0;
  Tensor<float> eps;
  std::vector<int> t;
  std::vector<std::vector<int>> tokens;
};

namespace detail {

inline constexpr std::uint64_t kBatchStream = 0xB47C;
inline constexpr std::uint64_t kEvalStream = 0xE7A1;
inline constexpr std::uint64_t kProbeStream = 0x960B;

inline Tensor<float> flip_latent(const Tensor<float>& x) {
  Tensor<float> out(x.shape());
  const int w = x.dim(x.rank() - 1);
  const std::size_t rows = x.size() / static_cast<std::size_t>(w);
  for (std::size_t r = 0; r < rows; ++r) {
    for (int i = 0; i < w; ++i) out[r * w + i] = x[r * w + (w - 1 - i)];
  }
  return out;
}

inline Tensor<float> stack_latents(const Dataset& d, const std::vector<int>& idx) {
  std::vector<Tensor<float>> parts;
  for (int i : idx) {
    const auto& l = d.records[static_cast<std::size_t>(i)].latent;
    Shape s{1};
    s.insert(s.end(), l.shape().begin(), l.shape().end());
    parts.push_back(l.reshaped(s));
  }
  return concat_batch(parts);
}

}  // namespace detail

/// Draws one micro-batch from `pool`. Every random choice comes from streams
/// keyed by (seed, key, row), so a batch does not depend on earlier ones.
inline Batch draw_batch(const Dataset& d, const std::vector<int>& pool, int batch, double cond_dropout, int T,
                        std::uint64_t seed, std::uint64_t key) {
  if (pool.empty()) throw Error("training set is empty");
  Batch b;
  std::vector<int> idx;
  std::vector<Tensor<float>> rows;
  for (int r = 0; r < batch; ++r) {
    Rng rng(derive_seed(seed, {detail::kBatchStream, key, static_cast<std::uint64_t>(r)}));
    const int i = pool[static_cast<std::size_t>(uniform_int(rng, 0, static_cast<int>(pool.size()) - 1))];
    idx.push_back(i);
    b.t.push_back(uniform_int(rng, 1, T));
    const bool drop = uniform01(rng) < cond_dropout;
    const bool flip = d.manifest.random_flip && uniform01(rng) < 0.5;
    const auto& rec = d.records[static_cast<std::size_t>(i)];
    b.tokens.push_back(drop ? Vocabulary::null_tokens(d.manifest.context_len) : rec.tokens);
    Shape s{1};
    s.insert(s.end(), rec.latent.shape().begin(), rec.latent.shape().end());
    rows.push_back((flip ? detail::flip_latent(rec.latent) : rec.latent).reshaped(s));
  }
  b.z0 = concat_batch(rows);
  b.eps = detail::row_noise<float>(b.z0.shape(), derive_seed(seed, {detail::kBatchStream, key}), 0);
  return b;
}

// ---------------------------------------------------------------------------
// Loss and gradients

/// Evaluates the distillation objective on (z_t, t, ctx) with target noise
/// eps and accumulates scale * d(total)/d(student params) into `grads`.
/// With kd disabled the teacher is not run and both KD terms are zero.
template <typename T>
LossBreakdown distill_loss_and_grad(const Model<T>* teacher, const Model<T>& student, const Tensor<T>& z_t,
                                    std::span<const int> t, const Tensor<T>& ctx, const Tensor<T>& eps,
                                    const LossWeights& w, bool kd_enabled, Gradients<T>* grads, double scale = 1.0) {
  Trace<T> trace;
  auto s = forward(student, z_t, t, ctx, grads ? &trace : nullptr);
  const double task = task_loss(eps, s.eps);
  double out_kd = 0, feat_kd = 0;
  Tensor<T> d_eps;
  std::vector<std::pair<std::string, Tensor<T>>> d_taps;
  if (grads) d_eps = mse_grad(eps, s.eps, scale);
  if (kd_enabled) {
    if (!teacher) throw Error("distillation with KD enabled needs a teacher");
    const auto tout = forward(*teacher, z_t, t, ctx);
    out_kd = output_kd_loss(tout.eps, s.eps);
    feat_kd = feature_kd_loss(tout.taps, s.taps);
    if (grads) {
      d_eps += mse_grad(tout.eps, s.eps, scale * w.lambda_out);
      for (const auto& [id, fs] : s.taps.entries) {
        d_taps.emplace_back(id, mse_grad(*tout.taps.find(id), fs, scale * w.lambda_feat));
      }
    }
  }
  if (grads) backward(student, trace, d_eps, d_taps, *grads);
  return total_loss(task, out_kd, feat_kd, kd_enabled ? w : LossWeights{0, 0});
}

// ---------------------------------------------------------------------------
// Evaluation

/// Fixed held-out probes: (z_t, t, tokens) and the noise that produced z_t.
struct EvalSet {
  Tensor<float> z_t;
  Tensor<float> eps;
  std::vector<int> t;
  std::vector<std::vector<int>> tokens;
  std::optional<Tensor<float>> teacher_eps;

  int size() const { return static_cast<int>(t.size()); }
};

/// Rows cycle through the validation split (the training split if there is
/// no validation data); noise and timesteps come from `seed`.
inline EvalSet make_eval_set(const Dataset& d, int size, const NoiseSchedule& sched, std::uint64_t seed) {
  auto pool = d.val_indices();
  if (pool.empty()) pool = d.train_indices();
  if (pool.empty()) throw Error("cannot build an eval set from an empty dataset");
  EvalSet e;
  std::vector<int> idx;
  for (int r = 0; r < size; ++r) {
    const int i = pool[static_cast<std::size_t>(r) % pool.size()];
    idx.push_back(i);
    Rng rng(derive_seed(seed, {detail::kEvalStream, static_cast<std::uint64_t>(r)}));
    e.t.push_back(uniform_int(rng, 1, sched.T));
    e.tokens.push_back(d.records[static_cast<std::size_t>(i)].tokens);
  }
  const auto z0 = detail::stack_latents(d, idx);
  e.eps = detail::row_noise<float>(z0.shape(), derive_seed(seed, {detail::kEvalStream}), 0);
  e.z_t = forward_diffuse(z0, e.eps, std::span<const int>(e.t), sched);
  return e;
}

/// Noise predictions on the eval probes, computed in chunks.
inline Tensor<float> predict_eval(const Model<float>& m, const TextEncoder<float>& enc, const EvalSet& e,
                                  int chunk = 16) {
  std::vector<Tensor<float>> parts;
  for (int b = 0; b < e.size(); b += chunk) {
    const int end = std::min(e.size(), b + chunk);
    std::vector<std::vector<int>> toks(e.tokens.begin() + b, e.tokens.begin() + end);
    std::span<const int> ts(e.t.data() + b, static_cast<std::size_t>(end - b));
    parts.push_back(forward(m, slice_batch(e.z_t, b, end), ts, enc.encode(toks)).eps);
  }
  return concat_batch(parts);
}

inline void attach_teacher(EvalSet& e, const Model<float>& teacher, const TextEncoder<float>& enc) {
  e.teacher_eps = predict_eval(teacher, enc, e);
}

struct EvalMetrics {
  double denoise_loss = 0;
  double teacher_mse = std::numeric_limits<double>::quiet_NaN();
};

/// Held-out denoising loss, plus MSE against the teacher's predictions when
/// the eval set carries them.
inline EvalMetrics evaluate(const Model<float>& m, const TextEncoder<float>& enc, const EvalSet& e) {
  const auto pred = predict_eval(m, enc, e);
  EvalMetrics out;
  out.denoise_loss = task_loss(e.eps, pred);
  if (e.teacher_eps) out.teacher_mse = output_kd_loss(*e.teacher_eps, pred);
  return out;
}

// ---------------------------------------------------------------------------
// Training loops

struct TrainHooks {
  std::function<void(int iteration, const LossBreakdown&)> on_step;
  std::function<void(const TrainRecord&)> on_eval;
  std::filesystem::path checkpoint_dir;  // empty: no checkpoints
  int checkpoint_every = 0;              // 0: only at the end
  std::filesystem::path resume_from;     // empty: start fresh
  std::uint64_t eval_seed = 1234;
};

struct TrainResult {
  Model<float> model;
  TextEncoder<float> encoder;
  TrainLog log;
};

namespace detail {

inline void check_finite(const LossBreakdown& l, int iteration) {
  if (!std::isfinite(l.total)) {
    std::ostringstream o;
    o << "non-finite loss at iteration " << iteration << " (task=" << l.task << ", out_kd=" << l.out_kd
      << ", feat_kd=" << l.feat_kd << ")";
    throw NumericalError(o.str());
  }
}

inline LossBreakdown mean_parts(const std::vector<LossBreakdown>& parts, const LossWeights& w) {
  double task = 0, out = 0, feat = 0;
  for (const auto& p : parts) {
    task += p.task;
    out += p.out_kd;
    feat += p.feat_kd;
  }
  const double n = static_cast<double>(parts.size());
  return total_loss(task / n, out / n, feat / n, w);
}

struct Checkpoint {
  int iteration = 0;
  Archive model, encoder, optimizer;
  TrainLog log;
};

inline void write_checkpoint(const std::filesystem::path& dir, const std::string& kind, int iteration,
                             const TrainConfig& tc, const Model<float>& m, const TextEncoder<float>& enc,
                             const AdamW& opt, const TrainLog& log) {
  std::filesystem::create_directories(dir);
  Archive a = to_archive(m);
  a.metadata["kind"] = kind;
  a.metadata["iteration"] = iteration;
  a.metadata["train_config"] = to_json(tc);
  write_archive(dir / "model.bkd", a);
  write_archive(dir / "text_encoder.bkd", to_archive(enc));
  write_archive(dir / "optimizer.bkd", opt.state());
  write_file(dir / "train_log.json", log.to_json().dump(2) + "\n");
  write_file(dir / "train_log.csv", log.to_csv());
}

inline Checkpoint read_checkpoint(const std::filesystem::path& dir) {
  Checkpoint c;
  c.model = read_archive(dir / "model.bkd");
  c.encoder = read_archive(dir / "text_encoder.bkd");
  c.optimizer = read_archive(dir / "optimizer.bkd");
  c.log = TrainLog::from_json(nlohmann::json::parse(read_file(dir / "train_log.json")));
  c.iteration = c.model.metadata.value("iteration", 0);
  return c;
}

inline std::vector<std::string> param_names(const Model<float>& m) {
  std::vector<std::string> n;
  for (const auto& p : m.parameters()) n.push_back(p.name);
  return n;
}

inline std::vector<Shape> param_shapes(const Model<float>& m) {
  std::vector<Shape> s;
  for (const auto& p : m.parameters()) s.push_back(p.value.shape());
  return s;
}

/// Shared loop. `micro_step` computes one micro-batch's breakdown and
/// accumulates gradients into `grads` scaled by 1/accum; `params`/`grad_ptrs`
/// are the optimizer's views.
struct Loop {
  const TrainConfig& tc;
  const TrainHooks& hooks;
  std::function<LossBreakdown(std::uint64_t key, bool with_grad, double scale)> micro_step;
  std::function<void()> zero_grads;
  std::function<void()> apply_update;
  std::function<EvalMetrics()> eval;
  std::function<void(int, const TrainLog&)> checkpoint;

  TrainLog run(int start_iteration, TrainLog log) {
    const auto t0 = std::chrono::steady_clock::now();
    const double t_offset = log.records.empty() ? 0.0 : log.last().wall_time;
    auto elapsed = [&] {
      return t_offset + std::chrono::duration<double>(std::chrono::steady_clock::now() - t0).count();
    };
    auto record = [&](int it, const LossBreakdown& l) {
      const EvalMetrics em = eval();
      TrainRecord r{it, l.task, l.out_kd, l.feat_kd, l.total, em.teacher_mse, em.denoise_loss, elapsed()};
      log.records.push_back(r);
      if (hooks.on_eval) hooks.on_eval(r);
    };
    if (log.records.empty()) {
      const LossBreakdown probe = micro_step(derive_seed(tc.seed, {kProbeStream}), false, 1.0);
      check_finite(probe, 0);
      record(0, probe);
    }
    const LossWeights w = tc.kd_enabled ? tc.loss_weights : LossWeights{0, 0};
    for (int it = start_iteration + 1; it <= tc.iterations; ++it) {
      zero_grads();
      std::vector<LossBreakdown> parts;
      for (int k = 0; k < tc.grad_accum_steps; ++k) {
        const std::uint64_t key = static_cast<std::uint64_t>(it) * 1024u + static_cast<std::uint64_t>(k);
        parts.push_back(micro_step(key, true, 1.0 / tc.grad_accum_steps));
      }
      const LossBreakdown l = mean_parts(parts, w);
      check_finite(l, it);
      apply_update();
      if (hooks.on_step) hooks.on_step(it, l);
      if (it % tc.eval_every == 0 || it == tc.iterations) record(it, l);
      if (checkpoint && hooks.checkpoint_every > 0 && it % hooks.checkpoint_every == 0 && it != tc.iterations) {
        checkpoint(it, log);
      }
    }
    if (checkpoint) checkpoint(std::max(tc.iterations, start_iteration), log);
    return log;
  }
};

}  // namespace detail

/// Trains a teacher U-Net and its text encoder with the task loss only.
inline TrainResult train_teacher(const UNetConfig& config, const Dataset& data, const TrainConfig& tc,
                                 const NoiseSchedule& sched, const TrainHooks& hooks = {}) {
  validate(tc);
  if (data.empty()) throw Error("train_teacher: dataset is empty");
  if (config.num_timesteps != sched.T) throw ConfigError("num_timesteps: model and schedule disagree");
  if (config.context_len != data.manifest.context_len) {
    throw ConfigError("context_len: model expects " + std::to_string(config.context_len) + ", dataset has " +
                      std::to_string(data.manifest.context_len));
  }
  Model<float> model = build_unet<float>(config, derive_seed(tc.seed, {0x7EAC}));
  TextEncoder<float> enc =
      TextEncoder<float>::build(data.manifest.vocabulary, config.context_len, config.context_dim,
                                derive_seed(tc.seed, {0x7E47}));
  auto names = detail::param_names(model);
  auto shapes = detail::param_shapes(model);
  names.push_back("text.token_embedding");
  shapes.push_back(enc.token_embedding.shape());
  names.push_back("text.position_embedding");
  shapes.push_back(enc.position_embedding.shape());
  AdamW opt({tc.learning_rate, 0.9, 0.999, 1e-8, tc.weight_decay}, names, shapes);

  int start = 0;
  TrainLog log;
  if (!hooks.resume_from.empty()) {
    auto ck = detail::read_checkpoint(hooks.resume_from);
    load_weights(model, ck.model);
    enc = text_encoder_from_archive(ck.encoder);
    opt.load_state(ck.optimizer);
    start = ck.iteration;
    log = std::move(ck.log);
  }

  Gradients<float> grads(model);
  Tensor<float> d_tok(enc.token_embedding.shape()), d_pos(enc.position_embedding.shape());
  const auto pool = data.train_indices().empty() ? data.val_indices() : data.train_indices();
  EvalSet eval_set = make_eval_set(data, tc.eval_size, sched, hooks.eval_seed);

  detail::Loop loop{tc, hooks, {}, {}, {}, {}, {}};
  loop.micro_step = [&](std::uint64_t key, bool with_grad, double scale) {
    const Batch b = draw_batch(data, pool, tc.batch_size, tc.cond_dropout, sched.T, tc.seed, key);
    const Tensor<float> zt = forward_diffuse(b.z0, b.eps, std::span<const int>(b.t), sched);
    const Tensor<float> ctx = enc.encode(b.tokens);
    Trace<float> trace;
    auto out = forward(model, zt, std::span<const int>(b.t), ctx, with_grad ? &trace : nullptr);
    const double task = task_loss(b.eps, out.eps);
    if (with_grad) {
      const Tensor<float> dctx = backward(model, trace, mse_grad(b.eps, out.eps, scale), {}, grads);
      enc.backward(b.tokens, dctx, d_tok, d_pos);
    }
    return total_loss(task, 0, 0, {0, 0});
  };
  loop.zero_grads = [&] {
    grads.zero();
    d_tok.fill(0.0f);
    d_pos.fill(0.0f);
  };
  loop.apply_update = [&] {
    std::vector<Tensor<float>*> p;
    std::vector<const Tensor<float>*> g;
    for (std::size_t i = 0; i < model.parameters().size(); ++i) {
      p.push_back(&model.parameters()[i].value);
      g.push_back(&grads.values[i]);
    }
    p.push_back(&enc.token_embedding);
    g.push_back(&d_tok);
    p.push_back(&enc.position_embedding);
    g.push_back(&d_pos);
    opt.step(p, g);
  };
  loop.eval = [&] { return evaluate(model, enc, eval_set); };
  if (!hooks.checkpoint_dir.empty()) {
    loop.checkpoint = [&](int it, const TrainLog& l) {
      detail::write_checkpoint(hooks.checkpoint_dir, "teacher", it, tc, model, enc, opt, l);
    };
  }
  log = loop.run(start, std::move(log));
  return {std::move(model), std::move(enc), std::move(log)};
}

/// Builds the student for `plan` (inheriting teacher weights when
/// init_mode == teacher) and retrains it with the distillation objective.
/// The teacher and its text encoder stay frozen; both networks see the same
/// (possibly condition-dropped) context.
inline TrainResult distill_student(const Model<float>& teacher, const TextEncoder<float>& enc,
                                   const CompressionPlan& plan, const Dataset& data, const TrainConfig& tc,
                                   const NoiseSchedule& sched, const TrainHooks& hooks = {}) {
  validate(tc);
  if (data.empty()) throw Error("distill_student: dataset is empty");
  if (teacher.config().num_timesteps != sched.T) throw ConfigError("num_timesteps: model and schedule disagree");
  const CompressionResult cr = apply_plan(teacher.config(), plan);
  Model<float> student = build_unet<float>(cr.student, derive_seed(tc.seed, {0x57D}));
  if (tc.init_mode == InitMode::Teacher) inherit_weights(teacher, student, cr.map);
  AdamW opt({tc.learning_rate, 0.9, 0.999, 1e-8, tc.weight_decay}, detail::param_names(student),
            detail::param_shapes(student));

  int start = 0;
  TrainLog log;
  if (!hooks.resume_from.empty()) {
    auto ck = detail::read_checkpoint(hooks.resume_from);
    load_weights(student, ck.model);
    opt.load_state(ck.optimizer);
    start = ck.iteration;
    log = std::move(ck.log);
  }

  Gradients<float> grads(student);
  const auto pool = data.train_indices().empty() ? data.val_indices() : data.train_indices();
  EvalSet eval_set = make_eval_set(data, tc.eval_size, sched, hooks.eval_seed);
  attach_teacher(eval_set, teacher, enc);

  detail::Loop loop{tc, hooks, {}, {}, {}, {}, {}};
  loop.micro_step = [&](std::uint64_t key, bool with_grad, double scale) {
    const Batch b = draw_batch(data, pool, tc.batch_size, tc.cond_dropout, sched.T, tc.seed, key);
    const Tensor<float> zt = forward_diffuse(b.z0, b.eps, std::span<const int>(b.t), sched);
    const Tensor<float> ctx = enc.encode(b.tokens);
    return distill_loss_and_grad(&teacher, student, zt, std::span<const int>(b.t), ctx, b.eps, tc.loss_weights,
                                 tc.kd_enabled, with_grad ? &grads : nullptr, scale);
  };
  loop.zero_grads = [&] { grads.zero(); };
  loop.apply_update = [&] {
    std::vector<Tensor<float>*> p;
    std::vector<const Tensor<float>*> g;
    for (std::size_t i = 0; i < student.parameters().size(); ++i) {
      p.push_back(&student.parameters()[i].value);
      g.push_back(&grads.values[i]);
    }
    opt.step(p, g);
  };
  loop.eval = [&] { return evaluate(student, enc, eval_set); };
  if (!hooks.checkpoint_dir.empty()) {
    loop.checkpoint = [&](int it, const TrainLog& l) {
      detail::write_checkpoint(hooks.checkpoint_dir, "student", it, tc, student, enc, opt, l);
    };
  }
  log = loop.run(start, std::move(log));
  return {std::move(student), enc, std::move(log)};
}

}  // namespace bkd

#endif  // BKD_DISTILL_HPP
