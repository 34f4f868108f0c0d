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

#include <filesystem>
#include <memory>
#include <string>
#include <vector>

#include "json.hpp"
#include "mvd/config.hpp"
#include "mvd/metrics.hpp"
#include "mvd/postprocess.hpp"
#include "mvd/scenario.hpp"

namespace mvd {

/// Files of one finished run. Paths are relative to `output_dir`.
struct RunArtifacts {
  std::filesystem::path output_dir;
  std::vector<std::string> files;  // hashed, sorted; excludes the manifest
  nlohmann::json manifest;
};

struct GenerateOutput {
  RunArtifacts artifacts;
  std::vector<LatentField> latents;
  std::vector<LatentField> images;
  MetricsReport metrics;
  std::vector<PairTrace> loss_trace;
};

/// Samples every view and writes view_XX.png, metrics.csv, loss_trace.csv,
/// config.json, optional dumps, manifest.json and timings.json. Outputs are
/// staged next to `output_dir` and moved into place only when the run
/// succeeds. Errors keep their kind and name the failing step.
GenerateOutput run_generate(const RunConfig& config);

struct RefineOutput {
  RunArtifacts artifacts;
  RefineResult result;
};

/// refined.obj and refine_trace.csv. One target per rig view.
RefineOutput run_refine(const RunConfig& config, const TriMesh& mesh, const std::vector<NormalTarget>& targets);

struct RenderOutput {
  RunArtifacts artifacts;
  std::vector<LatentField> frames;
  TriMesh baked;
};

/// Bakes vertex colors from the rig images, then blends frame_XXX.png along
/// the configured camera path (or an orbit) and writes baked.obj.
RenderOutput run_render(const RunConfig& config, const TriMesh& mesh, const std::vector<LatentField>& images);

struct EvalOutput {
  RunArtifacts artifacts;
  MetricsReport metrics;
};

/// Cross-view consistency of existing view images; writes metrics.csv.
EvalOutput run_eval(const RunConfig& config, const std::vector<LatentField>& images);

/// The scene's mesh (icosphere or OBJ). Throws ConfigError for flat scenes.
TriMesh load_scene_mesh(const RunConfig& config);
SceneParams scene_params(const RunConfig& config);

/// The rig is always framed on the scene mesh, so refined or edited meshes
/// are seen by the same cameras that produced the view images.
ViewRig build_scene_rig(const RunConfig& config, const TriMesh& scene_mesh);

/// Poses from the config, or an orbit of `orbit_frames` cameras on the
/// full-body track circle starting at view 0's azimuth.
std::vector<Camera> render_cameras(const RunConfig& config, const TriMesh& scene_mesh);

/// view_00.png ... for `count` views.
std::vector<LatentField> load_view_images(const std::filesystem::path& dir, int count);
/// normal_00.png ... (n * 0.5 + 0.5 encoded, black background).
std::vector<NormalTarget> load_normal_targets(const std::filesystem::path& dir, int count);
void write_normal_targets(const std::filesystem::path& dir, const std::vector<NormalTarget>& targets);

std::string view_file_name(const char* stem, int index, const char* ext, int digits = 2);

}  // namespace mvd
