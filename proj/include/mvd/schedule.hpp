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

#include <vector>

#include "mvd/core.hpp"

namespace mvd {

enum class BetaKind { linear, cosine };

struct BetaSpec {
  BetaKind kind = BetaKind::linear;
  double beta_start = 8.5e-4;
  double beta_end = 1.2e-2;

  friend bool operator==(const BetaSpec&, const BetaSpec&) = default;
};

/// Cumulative signal fractions for deterministic sampling. Timesteps run
/// t = T ... 1; alpha_bar(0) == 1 is the clean end of the chain.
class Schedule {
 public:
  /// Throws ConfigError on T < 1 or an invalid beta range.
  static Schedule build(int num_steps, const BetaSpec& spec = {});

  /// Wraps an externally supplied table (e.g. received over the wire).
  /// Validates the same invariants as build().
  static Schedule from_alpha_bar(std::vector<double> alpha_bar);

  int num_steps() const noexcept { return static_cast<int>(alpha_bar_.size()) - 1; }
  double alpha_bar(int t) const;
  const std::vector<double>& alpha_bar_table() const noexcept { return alpha_bar_; }
  const BetaSpec& beta_spec() const noexcept { return spec_; }

 private:
  Schedule(std::vector<double> alpha_bar, BetaSpec spec)
      : alpha_bar_(std::move(alpha_bar)), spec_(spec) {}

  std::vector<double> alpha_bar_;
  BetaSpec spec_;
};

/// x0 = (x_t - sqrt(1 - abar_t) * eps) / sqrt(abar_t). Valid for 0 <= t <= T.
LatentField predict_original(const LatentField& x_t, const LatentField& eps, int t,
                             const Schedule& s);

/// One deterministic step t -> t-1:
/// sqrt(abar_{t-1}) * x0 + sqrt(1 - abar_{t-1}) * eps.
LatentField ddim_step(const LatentField& x_t, const LatentField& eps, int t, const Schedule& s);

/// Inverse of predict_original: eps = (x_t - sqrt(abar_t) * x0) / sqrt(1 - abar_t).
/// Throws NumericalError when abar_t == 1.
LatentField noise_from_original(const LatentField& x_t, const LatentField& x0, int t,
                                const Schedule& s);

}  // namespace mvd
