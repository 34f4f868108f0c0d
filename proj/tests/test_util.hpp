// Copyright 2026 The mvdiff Authors
//
// Licensed under the Apache License, Version 2.0 (the "License");
// you may not use this file except in compliance with the License.
// You may obtain a copy of the License at
//
//     https://www.apache.org/licenses/LICENSE-2.0
//
// Unless required by applicable law or agreed to in writing, software
// distributed under the License is distributed on an "AS IS" BASIS,
// WITHOUT WARRANTIES OR CONDITIONS OF ANY KIND, either express or implied.
// See the License for the specific language governing permissions and
// limitations under the License.

#pragma once

#include <random>

#include "mvd/core.hpp"

namespace mvd::testing {

inline LatentField random_field(Shape shape, std::mt19937_64& rng, double lo = -1.0, double hi = 1.0,
                                Space space = Space::latent) {
  std::uniform_real_distribution<double> u(lo, hi);
  LatentField f(shape, space);
  for (auto& v : f.storage()) v = u(rng);
  return f;
}

inline LatentField constant_field(Shape shape, double v, Space space = Space::latent) {
  return LatentField(shape, space, v);
}

}  // namespace mvd::testing
