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

#include <ostream>
#include <string>
#include <utility>
#include <vector>

#include "mvd/consistency.hpp"
#include "mvd/core.hpp"
#include "mvd/scene.hpp"
#include "mvd/warpfield.hpp"

namespace mvd {

enum class GradientMethod { analytic, finite_difference };

struct OptimizerConfig {
  double step = 0.5;
  int iterations = 10;
  GradientMethod method = GradientMethod::analytic;
  double fd_epsilon = 1e-4;
  int max_halvings = 8;
  int period = 4;                    // events on t divisible by this
  double side_lock_fraction = 0.2;   // elapsed fraction that locks side views
  bool lock_front_back_at_start = true;

  void validate() const;
};

/// Symmetric cross-view photometric loss of two latents. Each direction is
/// the squared difference summed over channels and averaged over the pixels
/// where the warp is valid.
struct PairLoss {
  double value = 0.0;
  int valid_ij = 0;  // pixels of view i covered by the warp from j
  int valid_ji = 0;
  bool empty_overlap() const { return valid_ij == 0 && valid_ji == 0; }
};

PairLoss latent_pair_loss(const LatentField& x_i, const LatentField& x_j, int i, int j, const Codec& codec,
                          const ViewGeometry& geo);

struct PairGradient {
  PairLoss loss;
  LatentField grad_i;
  LatentField grad_j;
};

/// Exact gradient through the (linear) codec and the fixed warps.
PairGradient latent_pair_gradient(const LatentField& x_i, const LatentField& x_j, int i, int j,
                                  const Codec& codec, const ViewGeometry& geo);

/// Central differences, one coordinate at a time. Slow; meant for checks.
PairGradient latent_pair_gradient_fd(const LatentField& x_i, const LatentField& x_j, int i, int j,
                                     const Codec& codec, const ViewGeometry& geo, double epsilon);

struct PairResult {
  LatentField x_i;
  LatentField x_j;
  double loss_before = 0.0;
  double loss_after = 0.0;
  int iterations = 0;
  int halvings = 0;
  std::string note;  // "both-locked", "empty-overlap" or empty
};

/// Gradient descent on the pair loss. The step is preconditioned by the mean
/// valid-pixel count over 4 * ratio^2, so a step of 0.5 halves the gap of a
/// fully overlapping pair with one side locked. A step that raises the loss
/// is retried at half size.
PairResult optimize_pair(const LatentField& x_i, const LatentField& x_j, int i, int j, bool locked_i,
                         bool locked_j, const Codec& codec, const ViewGeometry& geo,
                         const OptimizerConfig& config);

/// True when an optimization event fires before denoising step t.
bool is_optimization_step(const OptimizerConfig& config, int t);

struct PairTrace {
  int t = 0;
  int phase = 0;  // 1: same track, 2: cross track
  int view_i = 0;
  int view_j = 0;
  double loss_before = 0.0;
  double loss_after = 0.0;
  int iterations = 0;
  int halvings = 0;
  std::string note;
};

/// Adjacent same-track pairs, each listed once in ascending order.
std::vector<std::pair<int, int>> same_track_pairs(const ViewRig& rig);

/// Views whose azimuth is 0 or 180 degrees (front/back) and 90 or 270 (side).
bool is_front_or_back(const ViewRig& rig, int v);
bool is_side(const ViewRig& rig, int v);

/// Applies lock rules for step t, then optimizes same-track pairs and the
/// cross-track pairs (i, i + N) with the upper-body view as fixed reference.
/// States are committed once at the end.
std::vector<PairTrace> optimization_event(std::vector<ViewState>& states, const ViewRig& rig,
                                          const Codec& codec, const ViewGeometry& geo,
                                          const OptimizerConfig& config, int t, int num_steps,
                                          int workers = 1);

void write_loss_trace_csv(std::ostream& os, const std::vector<PairTrace>& rows);

}  // namespace mvd
