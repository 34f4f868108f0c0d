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

#include <array>
#include <string>
#include <vector>

#include "mvd/core.hpp"
#include "mvd/scene.hpp"
#include "mvd/warpfield.hpp"

namespace mvd {

// ---------------------------------------------------------------- gradients

struct ImageGradient {
  LatentField gx;
  LatentField gy;
};

/// 3x3 Sobel per channel with replicated borders. Throws ContractError for
/// images smaller than 3x3.
ImageGradient sobel_gradient(const LatentField& img);

/// Transpose of sobel_gradient: maps gradients on (gx, gy) back to the image.
LatentField sobel_adjoint(const LatentField& dgx, const LatentField& dgy);

/// Sum over `valid` pixels of the squared Sobel difference of two images,
/// divided by the number of valid pixels. Zero when no pixel is valid.
double gradient_space_loss(const LatentField& a, const LatentField& b, const Map2D& valid);

// ---------------------------------------------------------- normal refinement

/// Per-view normal map in the export camera frame (x right, y up, z toward
/// the viewer) and its coverage.
struct NormalTarget {
  LatentField normal;  // 3 x H x W vectors
  Map2D mask;

  /// Accepts n * 0.5 + 0.5 encoded maps.
  static NormalTarget from_encoded(const LatentField& rgb, const Map2D& mask);
  bool empty() const { return normal.empty(); }
};

struct NormalRender {
  LatentField normal;  // export camera frame, zero at misses
  Map2D mask;
  std::vector<int> face;  // pixel-to-face assignment, -1 at misses
};

/// Smooth-shaded normals: area-weighted vertex normals interpolated with the
/// barycentrics of the camera ray's hit on the assigned face.
NormalRender render_normals(const TriMesh& mesh, const Camera& cam);

/// Normal targets rendered from a mesh, one per camera.
std::vector<NormalTarget> render_normal_targets(const TriMesh& mesh, const std::vector<Camera>& cams);

/// Pixel-to-face assignment for every camera, held fixed while differentiating.
using FaceAssignment = std::vector<std::vector<int>>;
FaceAssignment assign_faces(const TriMesh& mesh, const std::vector<Camera>& cams);

struct NormalLoss {
  double value = 0.0;
  long valid_pixels = 0;
  std::vector<Vec3> gradient;  // per vertex; empty unless requested
};

/// Loss with a frozen assignment. A pixel counts when its whole 3x3
/// neighbourhood (clamped at borders) is assigned and inside the target mask.
/// Faces are re-intersected with the current vertex positions, so the value
/// is a smooth function of the vertices that the gradient differentiates.
NormalLoss normal_loss_frozen(const TriMesh& mesh, const std::vector<Camera>& cams,
                              const std::vector<NormalTarget>& targets, const FaceAssignment& faces,
                              bool with_gradient, int workers = 1);

/// Sum over views of the squared Sobel difference between rendered and target
/// normals over shared coverage, per valid pixel. Throws ConfigError when a
/// target is missing or mis-sized.
double normal_refine_loss(const TriMesh& mesh, const std::vector<Camera>& cams,
                          const std::vector<NormalTarget>& targets, int workers = 1);

/// Mean squared uniform-Laplacian offset, in units of `scale`^2.
double laplacian_energy(const TriMesh& mesh, double scale);
std::vector<Vec3> laplacian_energy_gradient(const TriMesh& mesh, double scale);

struct RefineConfig {
  int iterations = 200;
  double step = 0.004;         // largest vertex move, fraction of the diagonal
  double laplacian_weight = 0.1;
  double max_move = 0.01;      // displacement cap, fraction of the diagonal
  int max_halvings = 6;
  int workers = 1;

  void validate() const;
};

struct RefineTrace {
  int iteration = 0;
  double data_loss = 0.0;
  double total_loss = 0.0;
  double step = 0.0;
  int halvings = 0;
  double max_displacement = 0.0;
};

struct RefineResult {
  TriMesh mesh;
  std::vector<RefineTrace> trace;  // row 0 is the starting mesh
  double initial_data_loss = 0.0;
  double final_data_loss = 0.0;
  std::string stop_reason;  // "iterations", "converged", "non-finite"
};

/// Normalized steepest descent on data loss + laplacian_weight * Laplacian
/// energy. Every accepted step lowers the total; rejected steps are halved.
/// Throws ContractError for unreferenced vertices.
RefineResult refine_mesh(const TriMesh& mesh, const std::vector<Camera>& cams,
                         const std::vector<NormalTarget>& targets, const RefineConfig& config);

// ----------------------------------------------------------------- rendering

struct BakeParams {
  double w_s = 0.2;
  double w_c = 1.0;
};

/// Per-vertex average of bilinear image samples over the views that see the
/// vertex, weighted by (n . dir) * w_s + w_c. Vertices seen by no view copy
/// the nearest colored vertex along edges (ties to the lower index).
TriMesh bake_vertex_colors(const TriMesh& mesh, const ViewRig& rig, const std::vector<LatentField>& images,
                           const BakeParams& params = {});

/// True when the segment from `point` to the camera center crosses no face
/// other than those listed in `skip`.
bool visible_from(const TriMesh& mesh, const Camera& cam, const Vec3& point, const std::vector<int>& skip);

/// Rasterized vertex-color image, 3 x H x W, `background` at misses.
LatentField render_vertex_colors(const TriMesh& mesh, const Camera& cam, double background = 0.0);

struct BlendWeights {
  Map2D w1;
  Map2D w2;
};

/// What a weight provider sees for one stage.
struct BlendStageInputs {
  std::array<int, 2> views{};
  std::array<LatentField, 2> warped;  // source images warped into the novel view
  std::array<Map2D, 2> valid;
  std::array<Map2D, 2> disparity;     // |O_k|, zero where invalid
  std::array<double, 2> angle_rad{};  // optical-axis angle to the novel camera
  double depth_range = 0.0;           // of the novel view's covered depths
};

class BlendWeightProvider {
 public:
  virtual ~BlendWeightProvider() = default;
  /// Must return maps in [0, 1] with w1 + w2 <= 1 at every pixel.
  virtual BlendWeights weights(const BlendStageInputs& in) const = 0;
};

struct HeuristicBlendParams {
  double tau_fraction = 0.05;  // of the novel view's depth range
};

/// w_k = valid_k * max(cos angle_k, 0) * exp(-|O_k| / tau), rescaled to sum to
/// one only where the raw sum exceeds one.
BlendWeights heuristic_blend_weights(const std::array<Map2D, 2>& disparity, const std::array<Map2D, 2>& valid,
                                     const std::array<double, 2>& angle_rad, double tau);

class HeuristicWeightProvider final : public BlendWeightProvider {
 public:
  explicit HeuristicWeightProvider(HeuristicBlendParams p = {}) : params_(p) {}
  BlendWeights weights(const BlendStageInputs& in) const override;

 private:
  HeuristicBlendParams params_;
};

/// Two nearest views of a track by optical-axis angle, ties to the lower
/// index. Throws ConfigError when the track has fewer than two views.
std::array<int, 2> nearest_track_views(const ViewRig& rig, Track track, const Camera& novel);

struct NovelViewResult {
  LatentField image;
  LatentField coarse;  // after the full-body stage
  std::array<BlendStageInputs, 2> stages;
  std::array<BlendWeights, 2> weights;
};

/// Coarse stage over the two nearest full-body views, then a fine stage over
/// the two nearest upper-body views, each compositing over the previous
/// result: out = W1 * I1 + W2 * I2 + (1 - W1 - W2) * prev.
NovelViewResult blend_novel_view(const TriMesh& mesh, const Camera& novel, const ViewRig& rig,
                                 const std::vector<LatentField>& images, const LatentField& base,
                                 const BlendWeightProvider& provider, const OcclusionParams& occ = {});

/// The compositing step on its own. Throws ContractError on shape mismatch or
/// weights that break 0 <= W1, W2 and W1 + W2 <= 1 (1e-9 slack).
LatentField composite_stage(const LatentField& prev, const LatentField& i1, const LatentField& i2,
                            const BlendWeights& w);

}  // namespace mvd
