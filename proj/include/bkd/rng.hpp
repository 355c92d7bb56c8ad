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

#ifndef BKD_RNG_HPP
#define BKD_RNG_HPP

#include <cstdint>
#include <initializer_list>
#include <random>

#include "bkd/tensor.hpp"

namespace bkd {

inline std::uint64_t splitmix64(std::uint64_t x) {
  x += 0x9E3779B97F4A7C15ull;
  x = (x ^ (x >> 30)) * 0xBF58476D1CE4E5B9ull;
  x = (x ^ (x >> 27)) * 0x94D049BB133111EBull;
  return x ^ (x >> 31);
}

/// Derive an independent stream seed from a root seed and a list of keys
/// (iteration, micro-batch, sample index, ...). Streams are stateless so a
/// resumed run reproduces the same draws.
inline std::uint64_t derive_seed(std::uint64_t root, std::initializer_list<std::uint64_t> keys) {
  std::uint64_t s = splitmix64(root);
  for (auto k : keys) s = splitmix64(s ^ splitmix64(k + 0x51ED27ull));
  return s;
}

using Rng = std::mt19937_64;

template <typename T>
Tensor<T> randn(const Shape& shape, Rng& rng) {
  std::normal_distribution<double> dist(0.0, 1.0);
  Tensor<T> out(shape);
  for (auto& v : out.vec()) v = static_cast<T>(dist(rng));
  return out;
}

template <typename T>
Tensor<T> randn(const Shape& shape, std::uint64_t seed) {
  Rng rng(seed);
  return randn<T>(shape, rng);
}

inline double uniform01(Rng& rng) { return std::uniform_real_distribution<double>(0.0, 1.0)(rng); }

inline int uniform_int(Rng& rng, int lo, int hi) {
  return std::uniform_int_distribution<int>(lo, hi)(rng);
}

}  // namespace bkd

#endif  // BKD_RNG_HPP
