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
#include <map>
#include <memory>
#include <mutex>
#include <vector>

#include "mvd/core.hpp"
#include "mvd/scene.hpp"

namespace mvd {

/// Image <-> latent mapping. Reference codecs are linear, so they also expose
/// the adjoint of decode for gradient computations.
class Codec {
 public:
  virtual ~Codec() = default;
  virtual LatentField encode(const LatentField& image) const = 0;
  virtual LatentField decode(const LatentField& latent) const = 0;
  /// Transpose of decode applied to an image-space gradient.
  virtual LatentField decode_adjoint(const LatentField& image_grad) const = 0;
  virtual int ratio() const = 0;
  Shape latent_shape(const Shape& image) const;
};

class IdentityCodec final : public Codec {
 public:
  LatentField encode(const LatentField& image) const override;
  LatentField decode(const LatentField& latent) const override;
  LatentField decode_adjoint(const LatentField& image_grad) const override;
  int ratio() const override { return 1; }
};

/// Area-average encode over ratio x ratio blocks; decode replicates each
/// latent texel over its block, so encode(decode(z)) == z.
class PoolingCodec final : public Codec {
 public:
  explicit PoolingCodec(int ratio);
  LatentField encode(const LatentField& image) const override;
  LatentField decode(const LatentField& latent) const override;
  LatentField decode_adjoint(const LatentField& image_grad) const override;
  int ratio() const override { return ratio_; }

 private:
  int ratio_;
};

std::unique_ptr<Codec> make_codec(const std::string& kind, int ratio);

/// Area-average of a per-pixel map down to latent resolution.
Map2D downsample_area(const Map2D& m, int ratio);

struct WarpTolerance {
  double abs_tol = 1e-4;  // scene units
  double rel_tol = 1e-3;
};

/// Precomputed gather for one ordered pair (src view j -> dst view i): for
/// every dst pixel, up to four source taps with convex weights, plus the
/// geometric quantities shared by warping and occlusion weighting.
struct WarpMap {
  int width = 0;
  int height = 0;
  int src_width = 0;
  int src_height = 0;
  std::vector<std::array<int, 4>> taps;  // source pixel indices, -1 unused
  std::vector<std::array<double, 4>> weights;
  std::vector<std::uint8_t> valid;
  std::vector<double> occlusion;   // (n . dir) * w_s + w_c, or 0
  std::vector<double> disparity;   // |projected depth - interpolated tap depth| where valid
  std::vector<double> src_depth;   // projected depth of the dst hit point in src
};

/// A dst pixel is valid when its hit point is not occluded from the source
/// camera (exact segment test against the faces seen around the footprint,
/// with depth slack max(abs_tol, rel_tol * depth)) and at least one bilinear
/// tap lies on the same surface.
WarpMap build_warp_map(const GBuffer& dst, const Camera& dst_cam, const GBuffer& src,
                       const Camera& src_cam, const TriMesh& mesh, const WarpTolerance& tol, double w_s,
                       double w_c);

struct WarpResult {
  LatentField image;
  Map2D mask;
};

WarpResult apply_warp(const LatentField& src_image, const WarpMap& map);

/// Scatter of a dst-image gradient back onto the source taps.
LatentField apply_warp_adjoint(const LatentField& dst_grad, const WarpMap& map);

/// Cross-view transport provider used by the sampler.
class ViewGeometry {
 public:
  virtual ~ViewGeometry() = default;
  virtual int num_views() const = 0;
  virtual int image_width() const = 0;
  virtual int image_height() const = 0;
  /// Source views blended into target `i` (self excluded).
  virtual std::vector<int> sources(int i) const = 0;
  /// The close-up view whose prediction overrides `i`, or -1.
  virtual int closeup_source(int i) const = 0;
  virtual WarpResult warp(const LatentField& src_image, int src, int dst) const = 0;
  /// Transpose of warp(., src, dst) applied to a gradient on the dst image.
  virtual LatentField warp_adjoint(const LatentField& dst_grad, int src, int dst) const = 0;
  /// M_src^dst at image resolution.
  virtual Map2D occlusion(int src, int dst) const = 0;
};

/// Degenerate geometry: every view sees the same image, all warps are the
/// identity and all weights are 1.
class IdentityGeometry final : public ViewGeometry {
 public:
  IdentityGeometry(int views, int width, int height) : views_(views), width_(width), height_(height) {}
  int num_views() const override { return views_; }
  int image_width() const override { return width_; }
  int image_height() const override { return height_; }
  std::vector<int> sources(int i) const override;
  int closeup_source(int) const override { return -1; }
  WarpResult warp(const LatentField& src_image, int src, int dst) const override;
  LatentField warp_adjoint(const LatentField& dst_grad, int src, int dst) const override;
  Map2D occlusion(int src, int dst) const override;

 private:
  int views_;
  int width_;
  int height_;
};

struct OcclusionParams {
  double w_s = 0.2;
  double w_c = 1.0;
  double abs_tol_factor = 1e-4;  // times the scene diagonal
  double rel_tol = 1e-3;
};

/// Mesh proxy seen through a two-track rig. G-buffers are rasterized once;
/// warp maps are built lazily per ordered pair and cached.
class MeshGeometry final : public ViewGeometry {
 public:
  MeshGeometry(TriMesh mesh, ViewRig rig, OcclusionParams params = {}, bool smooth_normals = false);

  int num_views() const override { return rig_.size(); }
  int image_width() const override { return rig_.views.front().width(); }
  int image_height() const override { return rig_.views.front().height(); }
  std::vector<int> sources(int i) const override;
  int closeup_source(int i) const override;
  WarpResult warp(const LatentField& src_image, int src, int dst) const override;
  LatentField warp_adjoint(const LatentField& dst_grad, int src, int dst) const override;
  Map2D occlusion(int src, int dst) const override;

  const TriMesh& mesh() const noexcept { return mesh_; }
  const ViewRig& rig() const noexcept { return rig_; }
  const GBuffer& gbuffer(int i) const { return gbuffers_.at(static_cast<std::size_t>(i)); }
  const WarpMap& warp_map(int src, int dst) const;
  WarpTolerance tolerance() const noexcept { return tol_; }

 private:
  TriMesh mesh_;
  ViewRig rig_;
  OcclusionParams params_;
  WarpTolerance tol_;
  std::vector<GBuffer> gbuffers_;
  mutable std::mutex mu_;
  mutable std::map<std::pair<int, int>, std::unique_ptr<WarpMap>> cache_;
};

/// Gather-warp of `src_image` (seen from view j) into view i.
WarpResult warp_image(const LatentField& src_image, int j, int i, const ViewGeometry& geo);

/// Weighted occlusion map M_j^i at image resolution.
Map2D occlusion_weights(int i, int j, const ViewGeometry& geo);

struct TransportResult {
  LatentField latent;
  Map2D validity;  // latent resolution, fraction of valid pixels per texel
};

/// encode(warp(decode(x0_j), j -> i)).
TransportResult transport_signal(const LatentField& x0_j, const Codec& codec, int j, int i,
                                 const ViewGeometry& geo);

}  // namespace mvd
