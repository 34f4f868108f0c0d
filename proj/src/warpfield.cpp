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

#include "mvd/warpfield.hpp"

#include <algorithm>
#include <cmath>

namespace mvd {
namespace {

constexpr const char* kModule = "warpfield";

// Parameter t of the first crossing of origin + t * seg with triangle abc, or
// -1 when the segment line misses it or runs parallel to it.
double segment_hit(const Vec3& origin, const Vec3& seg, const Vec3& a, const Vec3& b, const Vec3& c) {
  const Vec3 e1 = b - a;
  const Vec3 e2 = c - a;
  const Vec3 pv = seg.cross(e2);
  const double det = e1.dot(pv);
  if (std::abs(det) < 1e-14 * seg.squaredNorm() * e1.norm() * e2.norm()) return -1.0;
  const double inv = 1.0 / det;
  const Vec3 tv = origin - a;
  const double u = tv.dot(pv) * inv;
  if (u < 0.0 || u > 1.0) return -1.0;
  const Vec3 qv = tv.cross(e1);
  const double v = seg.dot(qv) * inv;
  if (v < 0.0 || u + v > 1.0) return -1.0;
  return e2.dot(qv) * inv;
}

}  // namespace

Shape Codec::latent_shape(const Shape& image) const {
  return {image.channels, image.height / ratio(), image.width / ratio()};
}

LatentField IdentityCodec::encode(const LatentField& image) const {
  LatentField out = image;
  out.set_space(Space::latent);
  return out;
}

LatentField IdentityCodec::decode(const LatentField& latent) const {
  LatentField out = latent;
  out.set_space(Space::image);
  return out;
}

LatentField IdentityCodec::decode_adjoint(const LatentField& image_grad) const {
  return encode(image_grad);
}

PoolingCodec::PoolingCodec(int ratio) : ratio_(ratio) {
  if (ratio < 1) throw ConfigError(kModule, "pooling ratio must be >= 1");
}

LatentField PoolingCodec::encode(const LatentField& image) const {
  const int r = ratio_;
  if (image.height() % r != 0 || image.width() % r != 0) {
    throw ContractError(kModule, "image size " + to_string(image.shape()) +
                                     " not divisible by codec ratio " + std::to_string(r));
  }
  LatentField out({image.channels(), image.height() / r, image.width() / r}, Space::latent);
  const double inv = 1.0 / (r * r);
  for (int c = 0; c < out.channels(); ++c) {
    for (int y = 0; y < out.height(); ++y) {
      for (int x = 0; x < out.width(); ++x) {
        double s = 0.0;
        for (int dy = 0; dy < r; ++dy) {
          for (int dx = 0; dx < r; ++dx) s += image.at(c, y * r + dy, x * r + dx);
        }
        out.at(c, y, x) = s * inv;
      }
    }
  }
  return out;
}

LatentField PoolingCodec::decode(const LatentField& latent) const {
  const int r = ratio_;
  LatentField out({latent.channels(), latent.height() * r, latent.width() * r}, Space::image);
  for (int c = 0; c < out.channels(); ++c) {
    for (int y = 0; y < out.height(); ++y) {
      for (int x = 0; x < out.width(); ++x) out.at(c, y, x) = latent.at(c, y / r, x / r);
    }
  }
  return out;
}

LatentField PoolingCodec::decode_adjoint(const LatentField& image_grad) const {
  const int r = ratio_;
  LatentField out({image_grad.channels(), image_grad.height() / r, image_grad.width() / r}, Space::latent);
  for (int c = 0; c < image_grad.channels(); ++c) {
    for (int y = 0; y < image_grad.height(); ++y) {
      for (int x = 0; x < image_grad.width(); ++x) out.at(c, y / r, x / r) += image_grad.at(c, y, x);
    }
  }
  return out;
}

std::unique_ptr<Codec> make_codec(const std::string& kind, int ratio) {
  if (kind == "identity") return std::make_unique<IdentityCodec>();
  if (kind == "pooling") return std::make_unique<PoolingCodec>(ratio);
  throw ConfigError(kModule, "unknown codec '" + kind + "'");
}

Map2D downsample_area(const Map2D& m, int ratio) {
  if (ratio == 1) return m;
  Map2D out(m.height / ratio, m.width / ratio);
  const double inv = 1.0 / (ratio * ratio);
  for (int y = 0; y < out.height; ++y) {
    for (int x = 0; x < out.width; ++x) {
      double s = 0.0;
      for (int dy = 0; dy < ratio; ++dy) {
        for (int dx = 0; dx < ratio; ++dx) s += m(y * ratio + dy, x * ratio + dx);
      }
      out(y, x) = s * inv;
    }
  }
  return out;
}

WarpMap build_warp_map(const GBuffer& dst, const Camera& dst_cam, const GBuffer& src,
                       const Camera& src_cam, const TriMesh& mesh, const WarpTolerance& tol, double w_s,
                       double w_c) {
  (void)dst_cam;
  WarpMap m;
  m.width = dst.width;
  m.height = dst.height;
  m.src_width = src.width;
  m.src_height = src.height;
  const std::size_t n = static_cast<std::size_t>(dst.width) * dst.height;
  m.taps.assign(n, {-1, -1, -1, -1});
  m.weights.assign(n, {0.0, 0.0, 0.0, 0.0});
  m.valid.assign(n, 0);
  m.occlusion.assign(n, 0.0);
  m.disparity.assign(n, 0.0);
  m.src_depth.assign(n, 0.0);
  const Vec3 origin = src_cam.position();
  const double pixel_depth = 1.0 / src_cam.intrinsics.fx;  // world size of a pixel per unit depth
  std::vector<int> candidates;

  for (std::size_t idx = 0; idx < n; ++idx) {
    if (!dst.mask[idx]) continue;
    const Vec3& p = dst.hit[idx];
    const Vec3 proj = src_cam.project(p);
    const double z = proj.z();
    if (!(z > 0.0) || !std::isfinite(proj.x()) || !std::isfinite(proj.y())) continue;
    const double fx = proj.x() - 0.5;
    const double fy = proj.y() - 0.5;
    const int x0 = static_cast<int>(std::floor(fx));
    const int y0 = static_cast<int>(std::floor(fy));
    const double tol_z = std::max(tol.abs_tol, tol.rel_tol * z);

    // Visibility: no surface seen around the footprint may cut the segment
    // from the source center to p more than tol_z in front of p.
    candidates.clear();
    for (int y = y0 - 1; y <= y0 + 2; ++y) {
      for (int x = x0 - 1; x <= x0 + 2; ++x) {
        if (x < 0 || y < 0 || x >= src.width || y >= src.height) continue;
        const int f = src.face[src.index(x, y)];
        if (f >= 0 && f != dst.face[idx]) candidates.push_back(f);
      }
    }
    std::sort(candidates.begin(), candidates.end());
    candidates.erase(std::unique(candidates.begin(), candidates.end()), candidates.end());
    const Vec3 seg = p - origin;
    const double t_max = 1.0 - tol_z / z;
    bool occluded = false;
    for (int f : candidates) {
      const auto& tri = mesh.faces[static_cast<std::size_t>(f)];
      const double t = segment_hit(origin, seg, mesh.vertices[tri[0]], mesh.vertices[tri[1]],
                                   mesh.vertices[tri[2]]);
      if (t > 0.0 && t < t_max) {
        occluded = true;
        break;
      }
    }
    if (occluded) continue;

    // Bilinear taps restricted to covered source pixels on the same surface.
    const double ax = fx - x0;
    const double ay = fy - y0;
    const std::array<int, 4> xs = {x0, x0 + 1, x0, x0 + 1};
    const std::array<int, 4> ys = {y0, y0, y0 + 1, y0 + 1};
    const std::array<double, 4> bw = {(1 - ax) * (1 - ay), ax * (1 - ay), (1 - ax) * ay, ax * ay};
    const double band = tol_z + 2.0 * pixel_depth * z;
    std::array<int, 4> taps = {-1, -1, -1, -1};
    std::array<double, 4> w = {0, 0, 0, 0};
    double wsum = 0.0;
    double inv_depth = 0.0;
    for (int k = 0; k < 4; ++k) {
      if (xs[k] < 0 || ys[k] < 0 || xs[k] >= src.width || ys[k] >= src.height) continue;
      const std::size_t s = src.index(xs[k], ys[k]);
      if (!src.mask[s] || bw[k] <= 0.0 || std::abs(src.depth[s] - z) > band) continue;
      taps[k] = static_cast<int>(s);
      w[k] = bw[k];
      wsum += bw[k];
      inv_depth += bw[k] / src.depth[s];
    }
    if (!(wsum > 1e-12)) continue;

    for (int k = 0; k < 4; ++k) w[k] /= wsum;
    m.taps[idx] = taps;
    m.weights[idx] = w;
    m.valid[idx] = 1;
    m.disparity[idx] = std::abs(z - wsum / inv_depth);
    m.src_depth[idx] = z;
    const Vec3 dir = (origin - p).normalized();
    m.occlusion[idx] = dst.normal[idx].dot(dir) * w_s + w_c;
  }
  return m;
}

WarpResult apply_warp(const LatentField& src_image, const WarpMap& map) {
  if (src_image.height() != map.src_height || src_image.width() != map.src_width) {
    throw ContractError(kModule, "warp source image " + to_string(src_image.shape()) +
                                     " does not match view resolution " +
                                     std::to_string(map.src_height) + "x" + std::to_string(map.src_width));
  }
  WarpResult r{LatentField({src_image.channels(), map.height, map.width}, Space::image),
               Map2D(map.height, map.width)};
  const std::size_t plane_src = static_cast<std::size_t>(map.src_width) * map.src_height;
  const std::size_t plane_dst = static_cast<std::size_t>(map.width) * map.height;
  auto& out = r.image.storage();
  const auto& in = src_image.storage();
  for (std::size_t idx = 0; idx < plane_dst; ++idx) {
    if (!map.valid[idx]) continue;
    r.mask.data[idx] = 1.0;
    const auto& taps = map.taps[idx];
    const auto& w = map.weights[idx];
    for (int c = 0; c < src_image.channels(); ++c) {
      double v = 0.0;
      for (int k = 0; k < 4; ++k) {
        if (taps[k] >= 0) v += w[k] * in[c * plane_src + static_cast<std::size_t>(taps[k])];
      }
      out[c * plane_dst + idx] = v;
    }
  }
  return r;
}

LatentField apply_warp_adjoint(const LatentField& dst_grad, const WarpMap& map) {
  if (dst_grad.height() != map.height || dst_grad.width() != map.width) {
    throw ContractError(kModule, "warp adjoint gradient " + to_string(dst_grad.shape()) +
                                     " does not match view resolution " + std::to_string(map.height) +
                                     "x" + std::to_string(map.width));
  }
  LatentField out({dst_grad.channels(), map.src_height, map.src_width}, Space::image);
  const std::size_t plane_src = static_cast<std::size_t>(map.src_width) * map.src_height;
  const std::size_t plane_dst = static_cast<std::size_t>(map.width) * map.height;
  auto& o = out.storage();
  const auto& g = dst_grad.storage();
  for (std::size_t idx = 0; idx < plane_dst; ++idx) {
    if (!map.valid[idx]) continue;
    const auto& taps = map.taps[idx];
    const auto& w = map.weights[idx];
    for (int c = 0; c < dst_grad.channels(); ++c) {
      const double gv = g[c * plane_dst + idx];
      for (int k = 0; k < 4; ++k) {
        if (taps[k] >= 0) o[c * plane_src + static_cast<std::size_t>(taps[k])] += w[k] * gv;
      }
    }
  }
  return out;
}

std::vector<int> IdentityGeometry::sources(int i) const {
  std::vector<int> s;
  for (int k = 0; k < views_; ++k) {
    if (k != i) s.push_back(k);
  }
  return s;
}

WarpResult IdentityGeometry::warp(const LatentField& src_image, int, int) const {
  if (src_image.height() != height_ || src_image.width() != width_) {
    throw ContractError(kModule, "warp source image resolution mismatch");
  }
  WarpResult r{src_image, Map2D(height_, width_, 1.0)};
  r.image.set_space(Space::image);
  return r;
}

LatentField IdentityGeometry::warp_adjoint(const LatentField& dst_grad, int, int) const {
  if (dst_grad.height() != height_ || dst_grad.width() != width_) {
    throw ContractError(kModule, "warp adjoint resolution mismatch");
  }
  LatentField out = dst_grad;
  out.set_space(Space::image);
  return out;
}

Map2D IdentityGeometry::occlusion(int, int) const { return Map2D(height_, width_, 1.0); }

MeshGeometry::MeshGeometry(TriMesh mesh, ViewRig rig, OcclusionParams params, bool smooth_normals)
    : mesh_(std::move(mesh)), rig_(std::move(rig)), params_(params) {
  mesh_.validate();
  if (mesh_.faces.empty()) throw ConfigError(kModule, "mesh has no faces");
  if (params_.w_s < 0.0) throw ConfigError(kModule, "w_s must be >= 0");
  if (!(params_.w_c > 0.0)) throw ConfigError(kModule, "w_c must be > 0");
  tol_ = WarpTolerance{params_.abs_tol_factor * mesh_.diagonal(), params_.rel_tol};
  RasterOptions ro;
  ro.smooth_normals = smooth_normals;
  for (const auto& cam : rig_.views) gbuffers_.push_back(rasterize(mesh_, cam, ro));
}

std::vector<int> MeshGeometry::sources(int i) const { return neighbors(rig_, i); }

int MeshGeometry::closeup_source(int i) const {
  if (!rig_.is_full_body(i)) return -1;
  const int j = i + rig_.per_track;
  return j < rig_.size() ? j : -1;
}

const WarpMap& MeshGeometry::warp_map(int src, int dst) const {
  if (src < 0 || dst < 0 || src >= num_views() || dst >= num_views()) {
    throw ContractError(kModule, "view index out of range");
  }
  std::lock_guard<std::mutex> lock(mu_);
  auto& slot = cache_[{src, dst}];
  if (!slot) {
    slot = std::make_unique<WarpMap>(build_warp_map(gbuffers_[dst], rig_.views[dst], gbuffers_[src],
                                                    rig_.views[src], mesh_, tol_, params_.w_s, params_.w_c));
  }
  return *slot;
}

WarpResult MeshGeometry::warp(const LatentField& src_image, int src, int dst) const {
  return apply_warp(src_image, warp_map(src, dst));
}

LatentField MeshGeometry::warp_adjoint(const LatentField& dst_grad, int src, int dst) const {
  return apply_warp_adjoint(dst_grad, warp_map(src, dst));
}

Map2D MeshGeometry::occlusion(int src, int dst) const {
  const WarpMap& m = warp_map(src, dst);
  Map2D out(m.height, m.width);
  out.data = m.occlusion;
  return out;
}

WarpResult warp_image(const LatentField& src_image, int j, int i, const ViewGeometry& geo) {
  return geo.warp(src_image, j, i);
}

Map2D occlusion_weights(int i, int j, const ViewGeometry& geo) { return geo.occlusion(j, i); }

TransportResult transport_signal(const LatentField& x0_j, const Codec& codec, int j, int i,
                                 const ViewGeometry& geo) {
  const WarpResult w = geo.warp(codec.decode(x0_j), j, i);
  return {codec.encode(w.image), downsample_area(w.mask, codec.ratio())};
}

}  // namespace mvd
