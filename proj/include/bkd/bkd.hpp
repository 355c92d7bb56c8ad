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

#ifndef BKD_BKD_HPP
#define BKD_BKD_HPP

#include "bkd/analysis.hpp"
#include "bkd/archive.hpp"
#include "bkd/compression.hpp"
#include "bkd/config.hpp"
#include "bkd/data.hpp"
#include "bkd/diffusion.hpp"
#include "bkd/distill.hpp"
#include "bkd/error.hpp"
#include "bkd/image.hpp"
#include "bkd/ops.hpp"
#include "bkd/optim.hpp"
#include "bkd/rng.hpp"
#include "bkd/tensor.hpp"
#include "bkd/text.hpp"
#include "bkd/unet.hpp"

namespace bkd {

inline constexpr const char* kVersion = "0.1.0";

}  // namespace bkd

#endif  // BKD_BKD_HPP
