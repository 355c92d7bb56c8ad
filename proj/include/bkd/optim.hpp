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

#ifndef BKD_OPTIM_HPP
#define BKD_OPTIM_HPP

#include <cmath>
#include <string>
#include <vector>

#include "bkd/archive.hpp"
#include "bkd/error.hpp"
#include "bkd/tensor.hpp"

namespace bkd {

struct AdamWConfig {
  double lr = 5e-5;
  double beta1 = 0.9;
  double beta2 = 0.999;
  double eps = 1e-8;
  double weight_decay = 0.01;
};

/// Adam with decoupled weight decay. State is keyed by parameter name.
class AdamW {
 public:
  AdamW() = default;
  AdamW(AdamWConfig cfg, std::vector<std::string> names, const std::vector<Shape>& shapes)
      : cfg_(cfg), names_(std::move(names)) {
    if (!(cfg_.lr > 0)) throw ConfigError("learning_rate: must be positive");
    for (const auto& s : shapes) {
      m_.emplace_back(s);
      v_.emplace_back(s);
    }
  }

  const AdamWConfig& config() const { return cfg_; }
  long steps() const { return step_; }

  void step(const std::vector<Tensor<float>*>& params, const std::vector<const Tensor<float>*>& grads) {
    if (params.size() != m_.size() || grads.size() != m_.size()) {
      throw DimensionError("AdamW: parameter count changed since construction");
    }
    ++step_;
    const double bc1 = 1.0 - std::pow(cfg_.beta1, static_cast<double>(step_));
    const double bc2 = 1.0 - std::pow(cfg_.beta2, static_cast<double>(step_));
    const float step_size = static_cast<float>(cfg_.lr / bc1);
    const float sqrt_bc2 = static_cast<float>(std::sqrt(bc2));
    const float decay = static_cast<float>(1.0 - cfg_.lr * cfg_.weight_decay);
    const float b1 = static_cast<float>(cfg_.beta1), b2 = static_cast<float>(cfg_.beta2);
    const float eps = static_cast<float>(cfg_.eps);
    for (std::size_t i = 0; i < params.size(); ++i) {
      Tensor<float>& p = *params[i];
      const Tensor<float>& g = *grads[i];
      p.check_same(g, "AdamW");
      float* m = m_[i].data();
      float* v = v_[i].data();
      for (std::size_t k = 0; k < p.size(); ++k) {
        p[k] *= decay;
        m[k] = b1 * m[k] + (1.0f - b1) * g[k];
        v[k] = b2 * v[k] + (1.0f - b2) * g[k] * g[k];
        p[k] -= step_size * m[k] / (std::sqrt(v[k]) / sqrt_bc2 + eps);
      }
    }
  }

  Archive state() const {
    Archive a;
    for (std::size_t i = 0; i < names_.size(); ++i) {
      a.tensors.emplace_back("exp_avg." + names_[i], m_[i]);
      a.tensors.emplace_back("exp_avg_sq." + names_[i], v_[i]);
    }
    a.metadata["step"] = step_;
    a.metadata["lr"] = cfg_.lr;
    a.metadata["beta1"] = cfg_.beta1;
    a.metadata["beta2"] = cfg_.beta2;
    a.metadata["eps"] = cfg_.eps;
    a.metadata["weight_decay"] = cfg_.weight_decay;
    return a;
  }

  void load_state(const Archive& a) {
    std::vector<std::string> problems;
    std::vector<Tensor<float>> m = m_, v = v_;
    for (std::size_t i = 0; i < names_.size(); ++i) {
      for (auto [prefix, dst] : {std::pair{"exp_avg.", &m[i]}, std::pair{"exp_avg_sq.", &v[i]}}) {
        const auto* t = a.find(prefix + names_[i]);
        if (!t) problems.push_back("missing " + std::string(prefix) + names_[i]);
        else if (t->shape() != dst->shape()) problems.push_back("shape mismatch for " + std::string(prefix) + names_[i]);
        else *dst = *t;
      }
    }
    if (!problems.empty()) {
      std::string msg = "optimizer state does not match:";
      for (const auto& p : problems) msg += "\n  - " + p;
      throw ArchiveError(msg);
    }
    m_ = std::move(m);
    v_ = std::move(v);
    step_ = a.metadata.value("step", 0L);
  }

 private:
  AdamWConfig cfg_;
  std::vector<std::string> names_;
  std::vector<Tensor<float>> m_, v_;
  long step_ = 0;
};

}  // namespace bkd

#endif  // BKD_OPTIM_HPP
