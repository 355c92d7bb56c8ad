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

#ifndef BKD_TESTS_TEST_UTIL_HPP
#define BKD_TESTS_TEST_UTIL_HPP

#include <algorithm>
#include <cmath>
#include <filesystem>
#include <functional>
#include <string>
#include <string_view>
#include <vector>

#include "bkd/config.hpp"
#include "bkd/rng.hpp"
#include "bkd/tensor.hpp"
#include "bkd/unet.hpp"

namespace bkd::testing {

inline double dot(const Tensor<double>& a, const Tensor<double>& b) {
  double s = 0.0;
  for (std::size_t i = 0; i < a.size(); ++i) s += a[i] * b[i];
  return s;
}

inline double rel_err(double a, double b, double floor = 1e-8) {
  const double den = std::max({std::abs(a), std::abs(b), floor});
  return std::abs(a - b) / den;
}

/// Largest relative error between `analytic` and central differences of
/// `loss` over up to `samples` entries of `x`. Magnitudes below `floor` are
/// compared absolutely.
inline double fd_max_rel_err(Tensor<double>& x, const Tensor<double>& analytic,
                             const std::function<double()>& loss, int samples, std::uint64_t seed,
                             double h = 1e-6, double floor = 1e-8) {
  Rng rng(seed);
  double worst = 0.0;
  const int n = static_cast<int>(x.size());
  for (int s = 0; s < std::min(samples, n); ++s) {
    const std::size_t i = samples >= n ? static_cast<std::size_t>(s)
                                       : static_cast<std::size_t>(uniform_int(rng, 0, n - 1));
    const double keep = x[i];
    x[i] = keep + h;
    const double lp = loss();
    x[i] = keep - h;
    const double lm = loss();
    x[i] = keep;
    const double num = (lp - lm) / (2 * h);
    if (std::abs(num) < 1e-9 && std::abs(analytic[i]) < 1e-9) continue;
    worst = std::max(worst, rel_err(num, analytic[i], floor));
  }
  return worst;
}

inline std::uint64_t fnv(std::string_view s) { return detail::fnv1a(s); }

/// Fresh scratch directory under the system temp dir.
inline std::filesystem::path scratch_dir(const std::string& name) {
  auto p = std::filesystem::temp_directory_path() / ("bkd_test_" + name);
  std::filesystem::remove_all(p);
  std::filesystem::create_directories(p);
  return p;
}

/// Small two-stage layout: stage channels {c0, c1}, attention at level 0.
inline UNetConfig small_config(int c0 = 8, int c1 = 16, int heads = 2, int groups = 4,
                               int ctx_dim = 8, int ctx_len = 3, int layers = 2) {
  SdLayout o;
  o.stage_channels = {c0, c1};
  o.attention_levels = {true, false};
  o.layers_per_block = layers;
  o.attention_heads = {heads};
  o.context_dim = ctx_dim;
  o.context_len = ctx_len;
  o.norm_groups = groups;
  o.time_embed_dim = 16;
  o.in_channels = 2;
  o.out_channels = 2;
  o.num_timesteps = 50;
  return build_sd_layout(o);
}

/// Overwrites every parameter with N(0, scale^2) draws so that no gradient
/// path is blocked by zero initialization.
template <typename T>
void randomize(Model<T>& m, std::uint64_t seed, double scale = 0.3) {
  Rng rng(seed);
  std::normal_distribution<double> d(0.0, scale);
  for (std::size_t i = 0; i < m.parameters().size(); ++i) {
    for (auto& v : m.parameters()[i].value.vec()) v = static_cast<T>(d(rng));
  }
}

}  // namespace bkd::testing

#endif  // BKD_TESTS_TEST_UTIL_HPP
