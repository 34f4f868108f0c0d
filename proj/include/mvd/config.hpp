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
#include <filesystem>
#include <string>
#include <vector>

#include "json.hpp"
#include "mvd/consistency.hpp"
#include "mvd/latentopt.hpp"
#include "mvd/postprocess.hpp"
#include "mvd/schedule.hpp"
#include "mvd/warpfield.hpp"

namespace mvd {

inline constexpr int kConfigSchemaVersion = 1;

struct SceneConfig {
  std::string kind = "sphere";  // sphere | obj | flat
  std::string obj_path;         // obj only
  int subdivisions = 3;         // sphere only
  int variants = 3;             // texture variants seen by the mesh oracle
  // flat scenes: identical views of one image, identity warps
  int views = 4;
  int channels = 3;
  int width = 64;
  int height = 64;
};

struct RigConfig {
  int per_track = 8;
  double vfov_deg = 40.0;
  int width = 128;
  int height = 128;
  double upper_fraction = 0.45;
  double elevation_deg = 0.0;
  double margin = 1.1;
};

struct DenoiserConfig {
  std::string kind = "mesh_oracle";  // mesh_oracle | gmm | oracle | remote
  int modes = 3;                     // gmm
  double amplitude = 0.5;            // gmm
  int target_variant = 0;            // oracle on mesh scenes
  std::string backend_cmd;           // remote over a child's stdio
  std::string backend_addr;          // remote over TCP, host:port
  double timeout_s = 120.0;
};

struct CodecConfig {
  std::string kind = "identity";  // identity | pooling
  int ratio = 1;
};

struct OptimizerSection {
  bool enabled = false;
  OptimizerConfig config;
};

struct CameraPose {
  Vec3 eye = Vec3(0, 0, 3);
  Vec3 target = Vec3::Zero();
  Vec3 up = Vec3(0, 1, 0);
};

struct BlendConfig {
  double tau_fraction = 0.05;
  int orbit_frames = 16;          // used when camera_path is empty
  std::vector<CameraPose> camera_path;
};

struct DumpConfig {
  bool latents = false;
  bool intermediates = false;
  int intermediate_stride = 25;   // dump steps with t % stride == 0, and t == 1
};

struct RunConfig {
  SceneConfig scene;
  int steps = 150;
  BetaSpec beta;
  RigConfig rig;
  DenoiserConfig denoiser;
  CodecConfig codec;
  SamplingPolicy sampling;
  OptimizerSection optimizer;
  OcclusionParams occlusion;
  RefineConfig refine;
  BlendConfig blend;
  std::uint64_t seed = 0;
  std::string output_dir = "out";
  int workers = 1;
  DumpConfig dump;

  /// Checks every field against the preconditions of the module that will
  /// consume it. Throws ConfigError naming the field.
  void validate() const;
  bool is_flat() const { return scene.kind == "flat"; }
  bool is_remote() const { return denoiser.kind == "remote"; }
};

/// Strict parse: unknown keys, wrong types and a wrong schema_version throw
/// ConfigError. Missing keys keep their defaults.
RunConfig config_from_json(const nlohmann::json& j);
nlohmann::json config_to_json(const RunConfig& c);

/// The run's identity: everything except output_dir and workers.
nlohmann::json config_identity_json(const RunConfig& c);

RunConfig load_config(const std::filesystem::path& path);

/// "demo2d" or "sphere".
RunConfig preset_config(const std::string& name);

}  // namespace mvd
