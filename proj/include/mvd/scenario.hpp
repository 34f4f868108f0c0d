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

#include <cstdint>
#include <map>
#include <memory>
#include <optional>
#include <string>
#include <vector>

#include "mvd/consistency.hpp"
#include "mvd/denoise.hpp"
#include "mvd/latentopt.hpp"
#include "mvd/scene.hpp"
#include "mvd/warpfield.hpp"

namespace mvd {

/// `count` equally weighted components; component k is
/// amplitude * cos(2 pi (k + 1) (x + 2y + 7c) / 16 + k).
GaussianMixtureModel cosine_modes(const Shape& shape, int count, double amplitude);

/// Index of the component closest in max-abs distance; `dist` receives it.
int nearest_component(const LatentField& x, const GaussianMixtureModel& gmm, double* dist = nullptr);

/// Smooth color texture on the unit sphere; variants differ in orientation,
/// frequency and phase. Values lie in [0.05, 0.95].
double procedural_texture(int variant, int channel, const Vec3& p);

/// 3-channel image of a texture variant; uncovered pixels are 0.
LatentField render_procedural(const GBuffer& g, int variant);

/// A textured mesh seen through a two-track rig, with everything the
/// sampler needs: warps, per-variant renders and condition maps.
struct SceneSetup {
  TriMesh mesh;
  ViewRig rig;
  std::unique_ptr<MeshGeometry> geometry;
  std::vector<std::vector<LatentField>> renders;  // [variant][view], image space
  std::vector<std::map<std::string, LatentField>> conditions;  // "depth", "normal"
};

struct SceneParams {
  int per_track = 8;
  int width = 128;
  int height = 128;
  double vfov_deg = 40.0;
  double upper_fraction = 0.45;
  double elevation_deg = 0.0;
  double margin = 1.1;
  int variants = 3;
  OcclusionParams occlusion;
};

SceneSetup make_scene(TriMesh mesh, const SceneParams& params);

/// Icosphere of the given subdivision level at the origin, radius 1.
SceneSetup make_sphere_scene(int subdivisions, const SceneParams& params);

/// Ablation rungs, cumulative in this order.
enum class Ablation { conditions_only, cg_noise, optimization, full };

struct AblationSetup {
  std::string name;
  SamplingPolicy policy;
  bool optimize = false;
};

AblationSetup ablation_setup(Ablation a);
std::vector<Ablation> all_ablations();

struct SampleOutput {
  std::vector<LatentField> latents;  // final x_0 per view
  std::vector<LatentField> images;   // decoded
  std::vector<PairTrace> loss_trace;
};

struct SampleInputs {
  const Schedule* schedule = nullptr;
  const ViewGeometry* geometry = nullptr;
  const ViewRig* rig = nullptr;  // needed when optimizing
  const Codec* codec = nullptr;
  DenoiserPool* denoisers = nullptr;
  std::vector<std::map<std::string, LatentField>> conditions;
  std::optional<std::string> prompt;
  SamplingPolicy policy;
  std::optional<OptimizerConfig> optimizer;
  Shape latent_shape;
  std::uint64_t seed = 0;
  int workers = 1;
  StepObserver observer;
};

/// Full rollout from seeded noise, with optimization events when enabled.
SampleOutput sample_views(const SampleInputs& in);

}  // namespace mvd
