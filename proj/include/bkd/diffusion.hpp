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

#ifndef BKD_DIFFUSION_HPP
#define BKD_DIFFUSION_HPP

#include <algorithm>
#include <cmath>
#include <cstdint>
#include <span>
#include <string>
#include <vector>

#include <nlohmann/json.hpp>

#include "bkd/error.hpp"
#include "bkd/rng.hpp"
#include "bkd/tensor.hpp"
#include "bkd/unet.hpp"

namespace bkd {

// ---------------------------------------------------------------------------
// Noise schedule

enum class ScheduleKind { Linear, ScaledLinear };

inline std::string_view to_string(ScheduleKind k) {
  return k == ScheduleKind::Linear ? "linear" : "scaled_linear";
}

inline ScheduleKind parse_schedule_kind(std::string_view s) {
  if (s == "linear") return ScheduleKind::Linear;
  if (s == "scaled_linear") return ScheduleKind::ScaledLinear;
  throw ConfigError("schedule.kind: unknown value '" + std::string(s) + "'");
}

/// beta[t-1], alpha_bar[t-1] hold the values for timestep t in [1, T].
struct NoiseSchedule {
  int T = 0;
  ScheduleKind kind = ScheduleKind::Linear;
  double beta_start = 0.0;
  double beta_end = 0.0;
  std::vector<double> beta;
  std::vector<double> alpha_bar;

  /// alpha_bar at t, with alpha_bar(0) = 1.
  double ab(int t) const {
    if (t == 0) return 1.0;
    return alpha_bar.at(static_cast<std::size_t>(t - 1));
  }
};

inline NoiseSchedule make_schedule(ScheduleKind kind, int T, double beta_start, double beta_end) {
  if (T < 1) throw DomainError("schedule: T must be >= 1, got " + std::to_string(T));
  if (!(beta_start > 0.0) || !(beta_start <= beta_end) || !(beta_end < 1.0)) {
    throw DomainError("schedule: need 0 < beta_start <= beta_end < 1");
  }
  NoiseSchedule s;
  s.T = T;
  s.kind = kind;
  s.beta_start = beta_start;
  s.beta_end = beta_end;
  s.beta.resize(static_cast<std::size_t>(T));
  for (int i = 0; i < T; ++i) {
    const double f = T == 1 ? 0.0 : static_cast<double>(i) / (T - 1);
    if (kind == ScheduleKind::Linear) {
      s.beta[static_cast<std::size_t>(i)] = beta_start + f * (beta_end - beta_start);
    } else {
      const double r = std::sqrt(beta_start) + f * (std::sqrt(beta_end) - std::sqrt(beta_start));
      s.beta[static_cast<std::size_t>(i)] = r * r;
    }
  }
  s.alpha_bar.resize(static_cast<std::size_t>(T));
  double prod = 1.0;
  for (int i = 0; i < T; ++i) {
    prod *= 1.0 - s.beta[static_cast<std::size_t>(i)];
    s.alpha_bar[static_cast<std::size_t>(i)] = prod;
  }
  return s;
}

/// Linear 1e-4 -> 0.02 over 1000 steps; shorter schedules scale both end
/// points by 1000/T so that alpha_bar(T) stays close to zero.
inline NoiseSchedule default_schedule(int T) {
  const double k = 1000.0 / T;
  return make_schedule(ScheduleKind::Linear, T, 1e-4 * k, 0.02 * k);
}

inline nlohmann::json to_json(const NoiseSchedule& s) {
  return {{"kind", to_string(s.kind)}, {"T", s.T}, {"beta_start", s.beta_start}, {"beta_end", s.beta_end}};
}

inline NoiseSchedule schedule_from_json(const nlohmann::json& j) {
  return make_schedule(parse_schedule_kind(j.value("kind", std::string("linear"))), j.at("T").get<int>(),
                       j.at("beta_start").get<double>(), j.at("beta_end").get<double>());
}

// ---------------------------------------------------------------------------
// Forward process

/// z_t = sqrt(ab_t) z + sqrt(1 - ab_t) eps, with one timestep per batch row.
template <typename T>
Tensor<T> forward_diffuse(const Tensor<T>& z, const Tensor<T>& eps, std::span<const int> t,
                          const NoiseSchedule& s) {
  z.check_same(eps, "forward_diffuse");
  const int batch = z.dim(0);
  if (static_cast<int>(t.size()) != batch) throw DimensionError("forward_diffuse: timestep count != batch");
  const std::size_t per = z.size() / static_cast<std::size_t>(batch);
  Tensor<T> out(z.shape());
  for (int b = 0; b < batch; ++b) {
    const int tb = t[static_cast<std::size_t>(b)];
    if (tb < 1 || tb > s.T) {
      throw DomainError("forward_diffuse: timestep " + std::to_string(tb) + " outside [1, " +
                        std::to_string(s.T) + "]");
    }
    const T a = static_cast<T>(std::sqrt(s.ab(tb)));
    const T c = static_cast<T>(std::sqrt(1.0 - s.ab(tb)));
    const std::size_t o = static_cast<std::size_t>(b) * per;
    for (std::size_t i = 0; i < per; ++i) out[o + i] = a * z[o + i] + c * eps[o + i];
  }
  return out;
}

template <typename T>
Tensor<T> forward_diffuse(const Tensor<T>& z, const Tensor<T>& eps, int t, const NoiseSchedule& s) {
  std::vector<int> ts(static_cast<std::size_t>(z.dim(0)), t);
  return forward_diffuse(z, eps, std::span<const int>(ts), s);
}

// ---------------------------------------------------------------------------
// Losses

struct LossWeights {
  double lambda_out = 1.0;
  double lambda_feat = 1.0;
};

struct LossBreakdown {
  double task = 0.0;
  double out_kd = 0.0;
  double feat_kd = 0.0;
  double total = 0.0;
};

/// Mean squared error over all elements.
template <typename T>
double mse(const Tensor<T>& target, const Tensor<T>& pred, const char* what = "mse") {
  target.check_same(pred, what);
  if (target.size() == 0) return 0.0;
  return sum_sq_diff(target, pred) / static_cast<double>(target.size());
}

template <typename T>
double task_loss(const Tensor<T>& eps_true, const Tensor<T>& eps_pred) {
  return mse(eps_true, eps_pred, "task_loss");
}

template <typename T>
double output_kd_loss(const Tensor<T>& eps_teacher, const Tensor<T>& eps_student) {
  return mse(eps_teacher, eps_student, "output_kd_loss");
}

/// Sum over the student's taps of the per-tap MSE against the teacher tap
/// with the same id. Teacher taps the student lacks are skipped.
template <typename T>
double feature_kd_loss(const FeatureTapSet<T>& teacher, const FeatureTapSet<T>& student) {
  double total = 0.0;
  for (const auto& [id, fs] : student.entries) {
    const Tensor<T>* ft = teacher.find(id);
    if (!ft) throw DimensionError("feature_kd_loss: teacher has no tap '" + id + "'");
    if (ft->shape() != fs.shape()) {
      throw DimensionError("feature_kd_loss: tap '" + id + "' teacher " + shape_str(ft->shape()) +
                           " vs student " + shape_str(fs.shape()));
    }
    total += mse(*ft, fs);
  }
  return total;
}

inline LossBreakdown total_loss(double task, double out_kd, double feat_kd, const LossWeights& w) {
  if (w.lambda_out < 0 || w.lambda_feat < 0) throw DomainError("loss weights must be nonnegative");
  return {task, out_kd, feat_kd, task + w.lambda_out * out_kd + w.lambda_feat * feat_kd};
}

/// d/d(pred) of scale * mse(target, pred).
template <typename T>
Tensor<T> mse_grad(const Tensor<T>& target, const Tensor<T>& pred, double scale) {
  Tensor<T> g(pred.shape());
  const T k = static_cast<T>(2.0 * scale / static_cast<double>(pred.size()));
  for (std::size_t i = 0; i < g.size(); ++i) g[i] = k * (pred[i] - target[i]);
  return g;
}

// ---------------------------------------------------------------------------
// Sampling

enum class SamplerKind { Ddpm, Ddim };

inline std::string_view to_string(SamplerKind k) { return k == SamplerKind::Ddpm ? "ddpm" : "ddim"; }

inline SamplerKind parse_sampler(std::string_view s) {
  if (s == "ddpm") return SamplerKind::Ddpm;
  if (s == "ddim") return SamplerKind::Ddim;
  throw ConfigError("sampler: unknown value '" + std::string(s) + "'");
}

struct SamplerConfig {
  int steps = 25;
  double guidance_scale = 7.5;
  SamplerKind sampler = SamplerKind::Ddim;
  double eta = 0.0;  // DDIM stochasticity; ddpm always uses 1
  std::uint64_t seed = 0;
  bool clip_denoised = true;  // clamp the x0 estimate to [-1, 1]
};

inline nlohmann::json to_json(const SamplerConfig& c) {
  return {{"steps", c.steps}, {"guidance_scale", c.guidance_scale}, {"sampler", to_string(c.sampler)},
          {"eta", c.eta}, {"seed", c.seed}, {"clip_denoised", c.clip_denoised}};
}

/// Evenly strided timesteps floor((i+1) * t_max / n), ascending, duplicates
/// removed.
inline std::vector<int> timestep_grid(int t_max, int n) {
  std::vector<int> g;
  for (int i = 0; i < n; ++i) {
    const int t = static_cast<int>((static_cast<long long>(i) + 1) * t_max / n);
    if (t >= 1 && (g.empty() || g.back() != t)) g.push_back(t);
  }
  return g;
}

/// Classifier-free guided noise estimate. s == 1 evaluates only the
/// conditional branch and s == 0 only the unconditional one.
template <typename T>
Tensor<T> guided_eps(const Model<T>& m, const Tensor<T>& x, std::span<const int> t, const Tensor<T>& cond,
                     const Tensor<T>& uncond, double s, AttentionRecorder* recorder = nullptr) {
  ForwardOptions opts;
  opts.recorder = recorder;
  if (s == 1.0) return forward(m, x, t, cond, static_cast<Trace<T>*>(nullptr), opts).eps;
  if (s == 0.0) return forward(m, x, t, uncond).eps;
  Tensor<T> ec = forward(m, x, t, cond, static_cast<Trace<T>*>(nullptr), opts).eps;
  Tensor<T> eu = forward(m, x, t, uncond).eps;
  const T k = static_cast<T>(s);
  for (std::size_t i = 0; i < eu.size(); ++i) eu[i] = eu[i] + k * (ec[i] - eu[i]);
  return eu;
}

namespace detail {

/// Per-row Gaussian noise: row b of step `key` draws from its own stream, so
/// a row's trajectory does not depend on the batch it is sampled in.
template <typename T>
Tensor<T> row_noise(const Shape& shape, std::uint64_t seed, std::uint64_t key) {
  Tensor<T> out(shape);
  const std::size_t per = out.size() / static_cast<std::size_t>(shape[0]);
  for (int b = 0; b < shape[0]; ++b) {
    Rng rng(derive_seed(seed, {key, static_cast<std::uint64_t>(b)}));
    std::normal_distribution<double> dist(0.0, 1.0);
    T* row = out.data() + static_cast<std::size_t>(b) * per;
    for (std::size_t i = 0; i < per; ++i) row[i] = static_cast<T>(dist(rng));
  }
  return out;
}

inline void check_sampler(const SamplerConfig& cfg, int T) {
  if (cfg.steps < 1 || cfg.steps > T) {
    throw DomainError("sampler: steps " + std::to_string(cfg.steps) + " outside [1, " + std::to_string(T) + "]");
  }
  if (!(cfg.guidance_scale >= 0.0)) throw DomainError("sampler: guidance scale must be nonnegative");
  if (!(cfg.eta >= 0.0)) throw DomainError("sampler: eta must be nonnegative");
}

}  // namespace detail

/// Runs the reverse process from x at grid.back() down to t = 0.
template <typename T>
Tensor<T> denoise(const Model<T>& m, Tensor<T> x, const std::vector<int>& grid, const Tensor<T>& cond,
                  const Tensor<T>& uncond, const SamplerConfig& cfg, const NoiseSchedule& sched,
                  AttentionRecorder* recorder = nullptr) {
  const int batch = x.dim(0);
  const double eta = cfg.sampler == SamplerKind::Ddpm ? 1.0 : cfg.eta;
  for (int i = static_cast<int>(grid.size()) - 1; i >= 0; --i) {
    const int t = grid[static_cast<std::size_t>(i)];
    const int t_prev = i > 0 ? grid[static_cast<std::size_t>(i - 1)] : 0;
    std::vector<int> ts(static_cast<std::size_t>(batch), t);
    Tensor<T> e = guided_eps(m, x, std::span<const int>(ts), cond, uncond, cfg.guidance_scale, recorder);
    const double ab = sched.ab(t), abp = sched.ab(t_prev);
    const double sigma = eta * std::sqrt((1.0 - abp) / (1.0 - ab)) * std::sqrt(1.0 - ab / abp);
    const double dir = std::sqrt(std::max(0.0, 1.0 - abp - sigma * sigma));
    Tensor<T> noise;
    if (sigma > 0.0) noise = detail::row_noise<T>(x.shape(), cfg.seed, static_cast<std::uint64_t>(i) + 1);
    for (std::size_t k = 0; k < x.size(); ++k) {
      double x0 = (x[k] - std::sqrt(1.0 - ab) * e[k]) / std::sqrt(ab);
      if (cfg.clip_denoised) x0 = std::clamp(x0, -1.0, 1.0);
      double v = std::sqrt(abp) * x0 + dir * e[k];
      if (sigma > 0.0) v += sigma * noise[k];
      x[k] = static_cast<T>(v);
    }
  }
  if (!x.all_finite()) throw NumericalError("sampler produced non-finite values");
  return x;
}

/// Guided sampling from seeded Gaussian noise. cond/uncond are [B, L, D].
template <typename T>
Tensor<T> sample(const Model<T>& m, const Tensor<T>& cond, const Tensor<T>& uncond, const SamplerConfig& cfg,
                 const NoiseSchedule& sched, int height, int width, AttentionRecorder* recorder = nullptr) {
  detail::check_sampler(cfg, sched.T);
  const Shape shape{cond.dim(0), m.config().in_channels, height, width};
  Tensor<T> x = detail::row_noise<T>(shape, cfg.seed, 0);
  return denoise(m, std::move(x), timestep_grid(sched.T, cfg.steps), cond, uncond, cfg, sched, recorder);
}

/// Image-to-image: noise `input` to t = floor(strength * T), then denoise
/// with ceil(steps * strength) guided steps.
template <typename T>
Tensor<T> sdedit(const Model<T>& m, const Tensor<T>& input, double strength, const Tensor<T>& cond,
                 const Tensor<T>& uncond, const SamplerConfig& cfg, const NoiseSchedule& sched) {
  if (!(strength >= 0.0 && strength <= 1.0)) throw DomainError("sdedit: strength must lie in [0, 1]");
  detail::check_sampler(cfg, sched.T);
  const int t_start = static_cast<int>(std::floor(strength * sched.T));
  if (t_start == 0) return input;
  const int n = std::max(1, static_cast<int>(std::ceil(cfg.steps * strength)));
  const auto grid = timestep_grid(t_start, std::min(n, t_start));
  Tensor<T> eps = detail::row_noise<T>(input.shape(), cfg.seed, 0);
  Tensor<T> x = forward_diffuse(input, eps, t_start, sched);
  return denoise(m, std::move(x), grid, cond, uncond, cfg, sched);
}

}  // namespace bkd

#endif  // BKD_DIFFUSION_HPP
