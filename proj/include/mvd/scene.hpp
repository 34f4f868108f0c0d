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

#include <Eigen/Core>
#include <Eigen/Geometry>
#include <array>
#include <cstdint>
#include <filesystem>
#include <optional>
#include <vector>

#include "mvd/core.hpp"

namespace mvd {

using Vec3 = Eigen::Vector3d;
using Vec2 = Eigen::Vector2d;
using Mat3 = Eigen::Matrix3d;

struct TriMesh {
  std::vector<Vec3> vertices;
  std::vector<std::array<int, 3>> faces;
  std::vector<Vec3> colors;  // empty or one per vertex, in [0,1]

  /// Throws ConfigError on out-of-range or repeated indices, non-finite
  /// coordinates, or a color count mismatch.
  void validate() const;

  Vec3 bbox_min() const;
  Vec3 bbox_max() const;
  double diagonal() const;

  /// Area-weighted per-vertex normals.
  std::vector<Vec3> vertex_normals() const;
  /// Vertex adjacency (sorted, unique) built from faces.
  std::vector<std::vector<int>> vertex_neighbors() const;
};

TriMesh make_icosphere(int subdivisions, double radius = 1.0, const Vec3& center = Vec3::Zero());
/// Axis-aligned square in the plane z = `z`, normal +z, two triangles.
TriMesh make_quad(double half_size, double z);

TriMesh read_obj(const std::filesystem::path& path);
void write_obj(const std::filesystem::path& path, const TriMesh& mesh);

struct Intrinsics {
  double fx = 1.0;
  double fy = 1.0;
  double cx = 0.0;
  double cy = 0.0;
  int width = 0;
  int height = 0;
};

/// Pinhole camera, x right / y down / z forward. Pixel (x, y) has its center
/// at continuous image coordinates (x + 0.5, y + 0.5).
struct Camera {
  Intrinsics intrinsics;
  Mat3 rotation = Mat3::Identity();  // world -> camera
  Vec3 translation = Vec3::Zero();

  static Camera look_at(const Vec3& eye, const Vec3& target, const Vec3& up, double vfov_deg,
                        int width, int height);

  void validate() const;
  Vec3 position() const { return -rotation.transpose() * translation; }
  Vec3 optical_axis() const { return rotation.row(2).transpose(); }
  Vec3 to_camera(const Vec3& world) const { return rotation * world + translation; }
  /// Continuous image coordinates and camera-space depth of a world point.
  Vec3 project(const Vec3& world) const;
  /// World direction through pixel center (px, py), scaled so its camera z is 1.
  Vec3 pixel_ray(int px, int py) const;
  int width() const { return intrinsics.width; }
  int height() const { return intrinsics.height; }
};

enum class Track { full_body, upper_body };

struct ViewRig {
  std::vector<Camera> views;   // 2N cameras: [0, N) full body, [N, 2N) upper body
  std::vector<Track> tracks;
  std::vector<double> azimuths_deg;
  int per_track = 0;

  int size() const { return static_cast<int>(views.size()); }
  bool is_full_body(int i) const { return tracks[static_cast<std::size_t>(i)] == Track::full_body; }
};

struct RigParams {
  Vec3 target_fb = Vec3::Zero();
  Vec3 target_ub = Vec3::Zero();
  double radius_fb = 3.0;
  double radius_ub = 2.0;
  double elevation_fb_deg = 0.0;
  double elevation_ub_deg = 0.0;
  int per_track = 8;
  double vfov_deg = 50.0;
  int width = 128;
  int height = 128;
};

/// Two concentric tracks of `per_track` cameras each, uniform azimuths
/// starting at 0 (camera on +z looking toward -z). Views i and i+N share an
/// azimuth. Throws ConfigError for N < 3 or non-positive radii.
ViewRig build_rig(const RigParams& p);

/// Rig parameters whose full-body cameras frame the whole bounding box and
/// whose upper-body cameras frame its top `upper_fraction`.
RigParams frame_rig(const TriMesh& mesh, int per_track, double vfov_deg, int width, int height,
                    double upper_fraction = 0.45, double elevation_deg = 0.0,
                    double margin = 1.1);

/// Same-track sources within 60 degrees (inclusive, ascending distance, ties
/// by index), then the paired upper-body view for full-body targets.
std::vector<int> neighbors(const ViewRig& rig, int i, double range_deg = 60.0);

struct GBuffer {
  int width = 0;
  int height = 0;
  std::vector<double> depth;  // camera z, +inf at misses
  std::vector<Vec3> normal;   // world frame, unit where covered
  std::vector<std::uint8_t> mask;
  std::vector<Vec3> hit;      // world coordinates
  std::vector<int> face;      // -1 at misses
  std::vector<Vec3> bary;     // perspective-correct barycentrics of `face`

  std::size_t index(int x, int y) const { return static_cast<std::size_t>(y) * width + x; }
  bool covered(int x, int y) const { return mask[index(x, y)] != 0; }
};

struct RasterOptions {
  bool smooth_normals = false;
  double near = 1e-6;
};

/// Nearest-hit rasterization; ties at equal depth go to the lower face index.
GBuffer rasterize(const TriMesh& mesh, const Camera& cam, const RasterOptions& opts = {});

struct ConditionMaps {
  LatentField depth;   // 1 x H x W, [0,1] over the mesh's depth range; 0 at misses
  LatentField normal;  // 3 x H x W, camera frame (x right, y up, z to viewer) as n*0.5+0.5
};

ConditionMaps render_conditions(const TriMesh& mesh, const Camera& cam);

}  // namespace mvd
