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

#include <condition_variable>
#include <cstdint>
#include <functional>
#include <map>
#include <mutex>
#include <optional>
#include <string>
#include <vector>

#include "mvd/core.hpp"
#include "mvd/denoise.hpp"
#include "mvd/schedule.hpp"
#include "mvd/warpfield.hpp"

namespace mvd {

struct ViewState {
  int view_id = 0;
  LatentField latent;
  bool locked = false;
  bool full_body = true;
};

struct SamplingPolicy {
  bool guidance = true;            // consistency-guided noise at all
  double cg_start_fraction = 0.1;  // elapsed fraction before guidance starts
  int original_steps = 1;          // per period of the alternation
  int guided_steps = 1;
  bool closeup_replacement = true;
  bool replace_before_noise = true;
  bool reference_attention = true;  // reference-view extended attention
  int reference_view = 0;

  /// Throws ConfigError naming the offending field.
  void validate() const;
};

/// True when step t (counting down from T) uses consistency-guided noise.
bool is_guided_step(const SamplingPolicy& policy, int t, int num_steps);

/// One blend input at target latent resolution.
struct BlendTerm {
  LatentField transported;  // x'_k
  LatentField mean;         // mu'_k
  Map2D weight;             // zero where the source is unusable
};

/// Occlusion-weighted blend with the variance-restoring scale
/// E = M_sum / sqrt(sum M^2). `terms[0]` must be the self term. Texels where
/// only the self term (or nothing) is positive keep `own_x0`. If `coverage`
/// is given, a covered texel with no positive weight is a contract error.
LatentField blend_predictions(const LatentField& own_x0, const std::vector<BlendTerm>& terms,
                              const Map2D* coverage = nullptr);

/// eps' = (x_t - sqrt(abar_t) x~) / sqrt(1 - abar_t).
LatentField cg_noise(const LatentField& x_t, const LatentField& blended, int t, const Schedule& s);

/// Overwrites texels of `blended` where `closeup_weight` > 0 with the
/// transported close-up prediction.
LatentField apply_upper_body_replacement(const LatentField& blended, const LatentField& closeup,
                                         const Map2D& closeup_weight);

struct BlendSource {
  int view = 0;
  Map2D weight;  // latent resolution, zeroed where the transport is not fully valid
};

/// Per target view: the self term followed by each source view.
struct BlendPlan {
  std::vector<std::vector<BlendSource>> targets;
  std::vector<Map2D> coverage;  // latent-resolution coverage of each view
  std::vector<int> closeup;     // close-up source per view or -1
};

BlendPlan build_blend_plan(const ViewGeometry& geo, const Codec& codec);

/// Checks out denoisers to workers. Serial-only denoisers are lent to one
/// caller at a time; concurrent-safe ones are shared.
class DenoiserPool {
 public:
  explicit DenoiserPool(std::vector<Denoiser*> denoisers);
  explicit DenoiserPool(Denoiser& d) : DenoiserPool(std::vector<Denoiser*>{&d}) {}

  DenoiserResponse denoise(const DenoiserRequest& req);
  /// Useful parallelism given the members' capabilities.
  int max_parallel(int workers) const;

 private:
  std::vector<Denoiser*> members_;
  std::vector<bool> busy_;
  bool shared_ = false;
  std::mutex mu_;
  std::condition_variable cv_;
};

struct StepRecord {
  int t = 0;
  bool guided = false;
  std::vector<LatentField> predicted;  // x0 per view
  std::vector<LatentField> blended;    // x~ per view (guided steps)
  std::vector<LatentField> noise;      // noise used per view
};

using StepObserver = std::function<void(const StepRecord&)>;

struct SamplerContext {
  const Schedule* schedule = nullptr;
  const ViewGeometry* geometry = nullptr;
  const Codec* codec = nullptr;
  DenoiserPool* denoisers = nullptr;
  const BlendPlan* plan = nullptr;
  std::vector<std::map<std::string, LatentField>> conditions;  // per view, may be empty
  std::optional<std::string> prompt;
  int workers = 1;
  StepObserver observer;
};

/// Advances every view from t to t-1. Any denoiser failure propagates before
/// a single state is modified.
void multiview_step(std::vector<ViewState>& states, SamplerContext& ctx, const SamplingPolicy& policy,
                    int t);

/// Hook run on every step before denoising (latent optimization events).
using PreStepHook = std::function<void(std::vector<ViewState>&, int t)>;

/// Full T..1 rollout.
void run_multiview(std::vector<ViewState>& states, SamplerContext& ctx, const SamplingPolicy& policy,
                   const PreStepHook& hook = {});

/// Independent standard-normal latents for `views` views, drawn in view order.
std::vector<LatentField> initial_latents(int views, const Shape& latent_shape, std::uint64_t seed);

/// Degenerate scenario: identical views, identity warps with unit weights,
/// identity codec. Returns the final images.
std::vector<LatentField> run_2d_degenerate(int views, Denoiser& denoiser, const Schedule& s,
                                           const SamplingPolicy& policy, const Shape& shape,
                                           std::uint64_t seed);

}  // namespace mvd
