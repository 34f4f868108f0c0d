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

#include "mvd/postprocess.hpp"

#include <Eigen/LU>
#include <algorithm>
#include <cmath>
#include <limits>
#include <numeric>
#include <queue>
#include <tuple>

namespace mvd {
namespace {

constexpr const char* kModule = "postprocess";
constexpr double kInf = std::numeric_limits<double>::infinity();

// Sobel taps indexed [dy + 1][dx + 1]; y grows downward.
constexpr double kSobelX[3][3] = {{-1, 0, 1}, {-2, 0, 2}, {-1, 0, 1}};
constexpr double kSobelY[3][3] = {{-1, -2, -1}, {0, 0, 0}, {1, 2, 1}};

int clampi(int v, int lo, int hi) { return std::min(std::max(v, lo), hi); }

void require_min_size(int h, int w, const char* what) {
  if (h < 3 || w < 3) {
    throw ContractError(kModule, std::string(what) + " needs at least 3x3 pixels, got " + std::to_string(h) +
                                     "x" + std::to_string(w));
  }
}

// Camera frame (y down, z forward) to the export frame (y up, z to viewer).
Mat3 export_rotation(const Camera& cam) {
  Mat3 flip = Mat3::Identity();
  flip(1, 1) = -1.0;
  flip(2, 2) = -1.0;
  return flip * cam.rotation;
}

// Smooth normal of the ray o + t d hitting face f's plane, with everything
// the reverse pass needs.
struct PixelHit {
  bool ok = false;
  Vec3 bary = Vec3::Zero();
  Vec3 unnormalized = Vec3::Zero();
  double length = 0.0;
  Vec3 normal = Vec3::Zero();  // world
  Mat3 system = Mat3::Zero();  // [e1 e2 -d]
};

PixelHit eval_hit(const TriMesh& mesh, const std::vector<Vec3>& vn, int f, const Vec3& o, const Vec3& d) {
  PixelHit h;
  const auto& face = mesh.faces[static_cast<std::size_t>(f)];
  const Vec3& a = mesh.vertices[face[0]];
  h.system.col(0) = mesh.vertices[face[1]] - a;
  h.system.col(1) = mesh.vertices[face[2]] - a;
  h.system.col(2) = -d;
  Eigen::FullPivLU<Mat3> lu(h.system);
  if (!lu.isInvertible()) return h;
  const Vec3 sol = lu.solve(o - a);
  h.bary = Vec3(1.0 - sol[0] - sol[1], sol[0], sol[1]);
  for (int k = 0; k < 3; ++k) h.unnormalized += h.bary[k] * vn[face[k]];
  h.length = h.unnormalized.norm();
  if (!(h.length > 1e-12) || !std::isfinite(h.length)) return h;
  h.normal = h.unnormalized / h.length;
  h.ok = true;
  return h;
}

// Reverse pass for one pixel: accumulates into per-vertex-normal and
// per-vertex position gradients. `g_world` is dLoss/dnormal (world).
void backprop_hit(const TriMesh& mesh, const std::vector<Vec3>& vn, int f, const PixelHit& h,
                  const Vec3& g_world, std::vector<Vec3>& g_vn, std::vector<Vec3>& g_pos) {
  const auto& face = mesh.faces[static_cast<std::size_t>(f)];
  const Vec3 g_un = (g_world - h.normal * h.normal.dot(g_world)) / h.length;
  Vec3 g_bary;
  for (int k = 0; k < 3; ++k) {
    g_vn[face[k]] += h.bary[k] * g_un;
    g_bary[k] = vn[face[k]].dot(g_un);
  }
  // The hit solves a + u e1 + v e2 - t d = o; implicit differentiation.
  const Vec3 g_sol(g_bary[1] - g_bary[0], g_bary[2] - g_bary[0], 0.0);
  const Vec3 lambda = h.system.transpose().fullPivLu().solve(g_sol);
  for (int k = 0; k < 3; ++k) g_pos[face[k]] -= h.bary[k] * lambda;
}

// Vertex normals are normalize(sum of incident face cross products).
void backprop_vertex_normals(const TriMesh& mesh, const std::vector<Vec3>& g_vn, std::vector<Vec3>& g_pos) {
  const std::size_t nv = mesh.vertices.size();
  std::vector<Vec3> m(nv, Vec3::Zero());
  for (const auto& f : mesh.faces) {
    const Vec3 c = (mesh.vertices[f[1]] - mesh.vertices[f[0]]).cross(mesh.vertices[f[2]] - mesh.vertices[f[0]]);
    for (int i : f) m[i] += c;
  }
  std::vector<Vec3> g_m(nv, Vec3::Zero());
  for (std::size_t i = 0; i < nv; ++i) {
    const double len = m[i].norm();
    if (len <= 0.0) continue;
    const Vec3 n = m[i] / len;
    g_m[i] = (g_vn[i] - n * n.dot(g_vn[i])) / len;
  }
  for (const auto& f : mesh.faces) {
    const Vec3 gc = g_m[f[0]] + g_m[f[1]] + g_m[f[2]];
    if (gc.isZero(0.0)) continue;
    const Vec3 e1 = mesh.vertices[f[1]] - mesh.vertices[f[0]];
    const Vec3 e2 = mesh.vertices[f[2]] - mesh.vertices[f[0]];
    const Vec3 g1 = e2.cross(gc);
    const Vec3 g2 = gc.cross(e1);
    g_pos[f[1]] += g1;
    g_pos[f[2]] += g2;
    g_pos[f[0]] -= g1 + g2;
  }
}

void check_targets(const std::vector<Camera>& cams, const std::vector<NormalTarget>& targets) {
  if (targets.size() != cams.size()) {
    throw ConfigError(kModule, "need one normal target per view: " + std::to_string(cams.size()) +
                                   " views, " + std::to_string(targets.size()) + " targets");
  }
  for (std::size_t v = 0; v < cams.size(); ++v) {
    const auto& t = targets[v];
    if (t.empty()) throw ConfigError(kModule, "missing normal target for view " + std::to_string(v));
    const Shape want{3, cams[v].height(), cams[v].width()};
    if (t.normal.shape() != want || t.mask.height != want.height || t.mask.width != want.width) {
      throw ConfigError(kModule, "normal target for view " + std::to_string(v) + " is " +
                                     to_string(t.normal.shape()) + ", expected " + to_string(want));
    }
    if (!t.normal.all_finite()) {
      throw ConfigError(kModule, "normal target for view " + std::to_string(v) + " is not finite");
    }
  }
}

double bilinear(const LatentField& img, int c, double fx, double fy) {
  const int w = img.width();
  const int h = img.height();
  fx = std::clamp(fx, 0.0, static_cast<double>(w - 1));
  fy = std::clamp(fy, 0.0, static_cast<double>(h - 1));
  const int x0 = static_cast<int>(std::floor(fx));
  const int y0 = static_cast<int>(std::floor(fy));
  const int x1 = std::min(x0 + 1, w - 1);
  const int y1 = std::min(y0 + 1, h - 1);
  const double ax = fx - x0;
  const double ay = fy - y0;
  return (1 - ay) * ((1 - ax) * img.at(c, y0, x0) + ax * img.at(c, y0, x1)) +
         ay * ((1 - ax) * img.at(c, y1, x0) + ax * img.at(c, y1, x1));
}

// Segment [p, p + s] against triangle (a, b, c): crossing parameter or -1.
double segment_crossing(const Vec3& p, const Vec3& s, const Vec3& a, const Vec3& b, const Vec3& c) {
  const Vec3 e1 = b - a;
  const Vec3 e2 = c - a;
  const Vec3 q = s.cross(e2);
  const double det = e1.dot(q);
  if (std::abs(det) < 1e-300) return -1.0;
  const double inv = 1.0 / det;
  const Vec3 r = p - a;
  const double u = r.dot(q) * inv;
  if (u < 0.0 || u > 1.0) return -1.0;
  const Vec3 qq = r.cross(e1);
  const double v = s.dot(qq) * inv;
  if (v < 0.0 || u + v > 1.0) return -1.0;
  return e2.dot(qq) * inv;
}

constexpr double kCrossEps = 1e-9;

// Screen-space face bins: every face whose projection may contain a pixel
// point lands in that point's tile. Faces reaching behind the camera go into
// every query.
class FaceBins {
 public:
  FaceBins(const TriMesh& mesh, const Camera& cam, int tile = 8) : tile_(tile) {
    tiles_x_ = (cam.width() + tile - 1) / tile;
    tiles_y_ = (cam.height() + tile - 1) / tile;
    bins_.resize(static_cast<std::size_t>(tiles_x_) * tiles_y_);
    std::vector<Vec3> proj(mesh.vertices.size());
    for (std::size_t i = 0; i < mesh.vertices.size(); ++i) proj[i] = cam.project(mesh.vertices[i]);
    for (std::size_t f = 0; f < mesh.faces.size(); ++f) {
      const auto& fc = mesh.faces[f];
      bool behind = false;
      double x0 = kInf, y0 = kInf, x1 = -kInf, y1 = -kInf;
      for (int i : fc) {
        if (!(proj[i].z() > 1e-9)) behind = true;
        x0 = std::min(x0, proj[i].x());
        x1 = std::max(x1, proj[i].x());
        y0 = std::min(y0, proj[i].y());
        y1 = std::max(y1, proj[i].y());
      }
      if (behind) {
        always_.push_back(static_cast<int>(f));
        continue;
      }
      if (x1 < -1.0 || y1 < -1.0 || x0 > cam.width() + 1.0 || y0 > cam.height() + 1.0) continue;
      const int tx0 = clampi(static_cast<int>(std::floor((x0 - 1.0) / tile)), 0, tiles_x_ - 1);
      const int tx1 = clampi(static_cast<int>(std::floor((x1 + 1.0) / tile)), 0, tiles_x_ - 1);
      const int ty0 = clampi(static_cast<int>(std::floor((y0 - 1.0) / tile)), 0, tiles_y_ - 1);
      const int ty1 = clampi(static_cast<int>(std::floor((y1 + 1.0) / tile)), 0, tiles_y_ - 1);
      for (int ty = ty0; ty <= ty1; ++ty) {
        for (int tx = tx0; tx <= tx1; ++tx) bins_[static_cast<std::size_t>(ty) * tiles_x_ + tx].push_back(static_cast<int>(f));
      }
    }
  }

  template <typename Fn>
  void for_each(double x, double y, Fn&& fn) const {
    for (int f : always_) fn(f);
    const int tx = clampi(static_cast<int>(std::floor(x / tile_)), 0, tiles_x_ - 1);
    const int ty = clampi(static_cast<int>(std::floor(y / tile_)), 0, tiles_y_ - 1);
    for (int f : bins_[static_cast<std::size_t>(ty) * tiles_x_ + tx]) fn(f);
  }

 private:
  int tile_;
  int tiles_x_ = 0;
  int tiles_y_ = 0;
  std::vector<std::vector<int>> bins_;
  std::vector<int> always_;
};

}  // namespace

// ---------------------------------------------------------------- gradients

ImageGradient sobel_gradient(const LatentField& img) {
  require_min_size(img.height(), img.width(), "sobel_gradient");
  const int h = img.height();
  const int w = img.width();
  ImageGradient g{LatentField(img.shape(), img.space()), LatentField(img.shape(), img.space())};
  for (int c = 0; c < img.channels(); ++c) {
    for (int y = 0; y < h; ++y) {
      for (int x = 0; x < w; ++x) {
        double sx = 0.0, sy = 0.0;
        for (int dy = -1; dy <= 1; ++dy) {
          const int yy = clampi(y + dy, 0, h - 1);
          for (int dx = -1; dx <= 1; ++dx) {
            const double v = img.at(c, yy, clampi(x + dx, 0, w - 1));
            sx += kSobelX[dy + 1][dx + 1] * v;
            sy += kSobelY[dy + 1][dx + 1] * v;
          }
        }
        g.gx.at(c, y, x) = sx;
        g.gy.at(c, y, x) = sy;
      }
    }
  }
  return g;
}

LatentField sobel_adjoint(const LatentField& dgx, const LatentField& dgy) {
  require_same_shape(dgx, dgy, kModule, "sobel adjoint inputs");
  require_min_size(dgx.height(), dgx.width(), "sobel_adjoint");
  const int h = dgx.height();
  const int w = dgx.width();
  LatentField out(dgx.shape(), dgx.space());
  for (int c = 0; c < dgx.channels(); ++c) {
    for (int y = 0; y < h; ++y) {
      for (int x = 0; x < w; ++x) {
        const double gx = dgx.at(c, y, x);
        const double gy = dgy.at(c, y, x);
        if (gx == 0.0 && gy == 0.0) continue;
        for (int dy = -1; dy <= 1; ++dy) {
          const int yy = clampi(y + dy, 0, h - 1);
          for (int dx = -1; dx <= 1; ++dx) {
            out.at(c, yy, clampi(x + dx, 0, w - 1)) += kSobelX[dy + 1][dx + 1] * gx + kSobelY[dy + 1][dx + 1] * gy;
          }
        }
      }
    }
  }
  return out;
}

double gradient_space_loss(const LatentField& a, const LatentField& b, const Map2D& valid) {
  require_same_shape(a, b, kModule, "gradient-space loss inputs");
  if (valid.height != a.height() || valid.width != a.width()) {
    throw ContractError(kModule, "gradient-space loss mask does not match " + to_string(a.shape()));
  }
  LatentField diff(a.shape(), a.space());
  for (std::size_t i = 0; i < diff.size(); ++i) diff[i] = a[i] - b[i];
  const ImageGradient g = sobel_gradient(diff);
  double sum = 0.0;
  long count = 0;
  for (int y = 0; y < a.height(); ++y) {
    for (int x = 0; x < a.width(); ++x) {
      if (!(valid(y, x) > 0.5)) continue;
      ++count;
      for (int c = 0; c < a.channels(); ++c) {
        sum += g.gx.at(c, y, x) * g.gx.at(c, y, x) + g.gy.at(c, y, x) * g.gy.at(c, y, x);
      }
    }
  }
  return count > 0 ? sum / static_cast<double>(count) : 0.0;
}

// ---------------------------------------------------------- normal refinement

NormalTarget NormalTarget::from_encoded(const LatentField& rgb, const Map2D& mask) {
  if (rgb.channels() != 3) throw ContractError(kModule, "encoded normals need 3 channels, got " + to_string(rgb.shape()));
  NormalTarget t{LatentField(rgb.shape(), Space::image), mask};
  for (std::size_t i = 0; i < rgb.size(); ++i) t.normal[i] = rgb[i] * 2.0 - 1.0;
  return t;
}

FaceAssignment assign_faces(const TriMesh& mesh, const std::vector<Camera>& cams) {
  FaceAssignment out;
  out.reserve(cams.size());
  for (const auto& cam : cams) out.push_back(rasterize(mesh, cam).face);
  return out;
}

NormalRender render_normals(const TriMesh& mesh, const Camera& cam) {
  const GBuffer g = rasterize(mesh, cam);
  const std::vector<Vec3> vn = mesh.vertex_normals();
  const Mat3 to_export = export_rotation(cam);
  const Vec3 origin = cam.position();
  NormalRender r{LatentField({3, g.height, g.width}, Space::image), Map2D(g.height, g.width), g.face};
  for (int y = 0; y < g.height; ++y) {
    for (int x = 0; x < g.width; ++x) {
      const std::size_t idx = g.index(x, y);
      if (g.face[idx] < 0) continue;
      const PixelHit h = eval_hit(mesh, vn, g.face[idx], origin, cam.pixel_ray(x, y));
      if (!h.ok) {
        r.face[idx] = -1;
        continue;
      }
      const Vec3 n = to_export * h.normal;
      for (int c = 0; c < 3; ++c) r.normal.at(c, y, x) = n[c];
      r.mask(y, x) = 1.0;
    }
  }
  return r;
}

std::vector<NormalTarget> render_normal_targets(const TriMesh& mesh, const std::vector<Camera>& cams) {
  std::vector<NormalTarget> out;
  out.reserve(cams.size());
  for (const auto& cam : cams) {
    NormalRender r = render_normals(mesh, cam);
    out.push_back(NormalTarget{std::move(r.normal), std::move(r.mask)});
  }
  return out;
}

NormalLoss normal_loss_frozen(const TriMesh& mesh, const std::vector<Camera>& cams,
                              const std::vector<NormalTarget>& targets, const FaceAssignment& faces,
                              bool with_gradient, int workers) {
  check_targets(cams, targets);
  if (faces.size() != cams.size()) {
    throw ContractError(kModule, "face assignment covers " + std::to_string(faces.size()) + " of " +
                                     std::to_string(cams.size()) + " views");
  }
  const std::vector<Vec3> vn = mesh.vertex_normals();
  const std::size_t nv = mesh.vertices.size();

  struct ViewTerm {
    double sum = 0.0;
    long count = 0;
    std::vector<Vec3> g_vn;
    std::vector<Vec3> g_pos;
  };
  std::vector<ViewTerm> terms(cams.size());

  parallel_for(static_cast<int>(cams.size()), workers, [&](int v) {
    const Camera& cam = cams[static_cast<std::size_t>(v)];
    const NormalTarget& tgt = targets[static_cast<std::size_t>(v)];
    const auto& assign = faces[static_cast<std::size_t>(v)];
    const int w = cam.width();
    const int h = cam.height();
    require_min_size(h, w, "normal loss view");
    if (assign.size() != static_cast<std::size_t>(w) * h) {
      throw ContractError(kModule, "face assignment of view " + std::to_string(v) + " has the wrong size");
    }
    const Mat3 to_export = export_rotation(cam);
    const Vec3 origin = cam.position();

    std::vector<PixelHit> hits(assign.size());
    std::vector<std::uint8_t> ok(assign.size(), 0);
    LatentField diff({3, h, w}, Space::image);
    for (int y = 0; y < h; ++y) {
      for (int x = 0; x < w; ++x) {
        const std::size_t idx = static_cast<std::size_t>(y) * w + x;
        const int f = assign[idx];
        if (f < 0 || static_cast<std::size_t>(f) >= mesh.faces.size()) continue;
        hits[idx] = eval_hit(mesh, vn, f, origin, cam.pixel_ray(x, y));
        if (!hits[idx].ok) continue;
        ok[idx] = 1;
        const Vec3 n = to_export * hits[idx].normal;
        for (int c = 0; c < 3; ++c) diff.at(c, y, x) = n[c] - tgt.normal.at(c, y, x);
      }
    }

    // Valid where the whole clamped 3x3 neighbourhood is rendered and targeted.
    Map2D valid(h, w);
    ViewTerm& term = terms[static_cast<std::size_t>(v)];
    for (int y = 0; y < h; ++y) {
      for (int x = 0; x < w; ++x) {
        bool all = true;
        for (int dy = -1; dy <= 1 && all; ++dy) {
          for (int dx = -1; dx <= 1 && all; ++dx) {
            const int yy = clampi(y + dy, 0, h - 1);
            const int xx = clampi(x + dx, 0, w - 1);
            all = ok[static_cast<std::size_t>(yy) * w + xx] && tgt.mask(yy, xx) > 0.5;
          }
        }
        if (all) {
          valid(y, x) = 1.0;
          ++term.count;
        }
      }
    }
    if (term.count == 0) return;
    ImageGradient g = sobel_gradient(diff);
    for (int y = 0; y < h; ++y) {
      for (int x = 0; x < w; ++x) {
        const bool in = valid(y, x) > 0.5;
        for (int c = 0; c < 3; ++c) {
          double& gx = g.gx.at(c, y, x);
          double& gy = g.gy.at(c, y, x);
          if (in) {
            term.sum += gx * gx + gy * gy;
            gx *= 2.0;
            gy *= 2.0;
          } else {
            gx = 0.0;
            gy = 0.0;
          }
        }
      }
    }
    if (!with_gradient) return;
    const LatentField g_img = sobel_adjoint(g.gx, g.gy);
    term.g_vn.assign(nv, Vec3::Zero());
    term.g_pos.assign(nv, Vec3::Zero());
    const Mat3 to_world = to_export.transpose();
    for (int y = 0; y < h; ++y) {
      for (int x = 0; x < w; ++x) {
        const std::size_t idx = static_cast<std::size_t>(y) * w + x;
        if (!ok[idx]) continue;
        const Vec3 ge(g_img.at(0, y, x), g_img.at(1, y, x), g_img.at(2, y, x));
        if (ge.isZero(0.0)) continue;
        backprop_hit(mesh, vn, assign[idx], hits[idx], to_world * ge, term.g_vn, term.g_pos);
      }
    }
  });

  NormalLoss out;
  double sum = 0.0;
  for (const auto& t : terms) {
    sum += t.sum;
    out.valid_pixels += t.count;
  }
  out.value = out.valid_pixels > 0 ? sum / static_cast<double>(out.valid_pixels) : 0.0;
  if (with_gradient) {
    std::vector<Vec3> g_vn(nv, Vec3::Zero());
    out.gradient.assign(nv, Vec3::Zero());
    for (const auto& t : terms) {
      if (t.g_vn.empty()) continue;
      for (std::size_t i = 0; i < nv; ++i) {
        g_vn[i] += t.g_vn[i];
        out.gradient[i] += t.g_pos[i];
      }
    }
    backprop_vertex_normals(mesh, g_vn, out.gradient);
    if (out.valid_pixels > 0) {
      for (auto& g : out.gradient) g /= static_cast<double>(out.valid_pixels);
    }
  }
  return out;
}

double normal_refine_loss(const TriMesh& mesh, const std::vector<Camera>& cams,
                          const std::vector<NormalTarget>& targets, int workers) {
  check_targets(cams, targets);
  return normal_loss_frozen(mesh, cams, targets, assign_faces(mesh, cams), false, workers).value;
}

double laplacian_energy(const TriMesh& mesh, double scale) {
  const auto nb = mesh.vertex_neighbors();
  double sum = 0.0;
  for (std::size_t i = 0; i < nb.size(); ++i) {
    if (nb[i].empty()) continue;
    Vec3 mean = Vec3::Zero();
    for (int j : nb[i]) mean += mesh.vertices[j];
    mean /= static_cast<double>(nb[i].size());
    sum += (mesh.vertices[i] - mean).squaredNorm();
  }
  if (nb.empty()) return 0.0;
  return sum / (static_cast<double>(nb.size()) * scale * scale);
}

std::vector<Vec3> laplacian_energy_gradient(const TriMesh& mesh, double scale) {
  const auto nb = mesh.vertex_neighbors();
  std::vector<Vec3> g(nb.size(), Vec3::Zero());
  if (nb.empty()) return g;
  const double k = 2.0 / (static_cast<double>(nb.size()) * scale * scale);
  for (std::size_t i = 0; i < nb.size(); ++i) {
    if (nb[i].empty()) continue;
    Vec3 mean = Vec3::Zero();
    for (int j : nb[i]) mean += mesh.vertices[j];
    const double deg = static_cast<double>(nb[i].size());
    const Vec3 delta = mesh.vertices[i] - mean / deg;
    g[i] += k * delta;
    for (int j : nb[i]) g[j] -= (k / deg) * delta;
  }
  return g;
}

void RefineConfig::validate() const {
  if (iterations < 0) throw ConfigError(kModule, "refine iterations must be >= 0");
  if (!(step > 0.0) || !std::isfinite(step)) throw ConfigError(kModule, "refine step must be > 0");
  if (!(laplacian_weight >= 0.0) || !std::isfinite(laplacian_weight)) {
    throw ConfigError(kModule, "laplacian weight must be >= 0");
  }
  if (!(max_move > 0.0) || !std::isfinite(max_move)) throw ConfigError(kModule, "displacement cap must be > 0");
  if (max_halvings < 0) throw ConfigError(kModule, "max halvings must be >= 0");
  if (workers < 1) throw ConfigError(kModule, "workers must be >= 1");
}

RefineResult refine_mesh(const TriMesh& mesh, const std::vector<Camera>& cams,
                         const std::vector<NormalTarget>& targets, const RefineConfig& config) {
  config.validate();
  mesh.validate();
  check_targets(cams, targets);
  {
    std::vector<std::uint8_t> used(mesh.vertices.size(), 0);
    for (const auto& f : mesh.faces) {
      for (int i : f) used[i] = 1;
    }
    const auto it = std::find(used.begin(), used.end(), 0);
    if (it != used.end()) {
      throw ContractError(kModule, "vertex " + std::to_string(it - used.begin()) + " is not referenced by any face");
    }
  }
  const double diag = mesh.diagonal();
  if (!(diag > 0.0)) throw ContractError(kModule, "mesh has a degenerate bounding box");
  const double lambda = config.laplacian_weight;
  const double cap = config.max_move * diag;

  struct Eval {
    NormalLoss data;
    double total = 0.0;
  };
  auto evaluate = [&](const TriMesh& m) {
    Eval e;
    e.data = normal_loss_frozen(m, cams, targets, assign_faces(m, cams), true, config.workers);
    e.total = e.data.value + (lambda > 0.0 ? lambda * laplacian_energy(m, diag) : 0.0);
    return e;
  };
  auto finite_mesh = [](const TriMesh& m) {
    return std::all_of(m.vertices.begin(), m.vertices.end(), [](const Vec3& v) { return v.allFinite(); });
  };

  RefineResult out;
  out.mesh = mesh;
  Eval cur = evaluate(out.mesh);
  out.initial_data_loss = cur.data.value;
  out.final_data_loss = cur.data.value;
  out.trace.push_back({0, cur.data.value, cur.total, 0.0, 0, 0.0});
  if (!std::isfinite(cur.total)) {
    out.stop_reason = "non-finite";
    return out;
  }
  out.stop_reason = "iterations";
  double step = config.step;
  for (int it = 1; it <= config.iterations; ++it) {
    std::vector<Vec3> g = cur.data.gradient;
    if (lambda > 0.0) {
      const auto gl = laplacian_energy_gradient(out.mesh, diag);
      for (std::size_t i = 0; i < g.size(); ++i) g[i] += lambda * gl[i];
    }
    double gmax = 0.0;
    for (const auto& v : g) gmax = std::max(gmax, v.norm());
    if (!std::isfinite(gmax)) {
      out.stop_reason = "non-finite";
      break;
    }
    if (gmax == 0.0) {
      out.stop_reason = "converged";
      break;
    }
    bool accepted = false;
    int halvings = 0;
    double s = step;
    for (; halvings <= config.max_halvings; ++halvings, s *= 0.5) {
      TriMesh cand = out.mesh;
      double moved = 0.0;
      for (std::size_t i = 0; i < g.size(); ++i) {
        Vec3 d = -(s * diag / gmax) * g[i];
        const double len = d.norm();
        if (len > cap) d *= cap / len;
        moved = std::max(moved, d.norm());
        cand.vertices[i] += d;
      }
      if (!finite_mesh(cand)) {
        out.stop_reason = "non-finite";
        break;
      }
      Eval next = evaluate(cand);
      if (!std::isfinite(next.total)) {
        out.stop_reason = "non-finite";
        break;
      }
      if (next.total < cur.total) {
        out.mesh = std::move(cand);
        cur = std::move(next);
        out.trace.push_back({it, cur.data.value, cur.total, s, halvings, moved});
        accepted = true;
        break;
      }
    }
    if (out.stop_reason == "non-finite") break;
    if (!accepted) {
      out.stop_reason = "converged";
      break;
    }
    step = std::min(config.step, s * 2.0);
  }
  out.final_data_loss = cur.data.value;
  return out;
}

// ----------------------------------------------------------------- rendering

bool visible_from(const TriMesh& mesh, const Camera& cam, const Vec3& point, const std::vector<int>& skip) {
  const Vec3 seg = cam.position() - point;
  for (std::size_t f = 0; f < mesh.faces.size(); ++f) {
    if (std::find(skip.begin(), skip.end(), static_cast<int>(f)) != skip.end()) continue;
    const auto& fc = mesh.faces[f];
    const double t = segment_crossing(point, seg, mesh.vertices[fc[0]], mesh.vertices[fc[1]], mesh.vertices[fc[2]]);
    if (t > kCrossEps && t < 1.0) return false;
  }
  return true;
}

TriMesh bake_vertex_colors(const TriMesh& mesh, const ViewRig& rig, const std::vector<LatentField>& images,
                           const BakeParams& params) {
  mesh.validate();
  if (static_cast<int>(images.size()) != rig.size()) {
    throw ContractError(kModule, "bake needs one image per view: " + std::to_string(rig.size()) + " views, " +
                                     std::to_string(images.size()) + " images");
  }
  for (int v = 0; v < rig.size(); ++v) {
    const auto& img = images[static_cast<std::size_t>(v)];
    const Shape want{3, rig.views[static_cast<std::size_t>(v)].height(), rig.views[static_cast<std::size_t>(v)].width()};
    if (img.shape() != want) {
      throw ContractError(kModule, "bake image " + std::to_string(v) + " is " + to_string(img.shape()) +
                                       ", expected " + to_string(want));
    }
  }
  const std::size_t nv = mesh.vertices.size();
  std::vector<std::vector<int>> incident(nv);
  for (std::size_t f = 0; f < mesh.faces.size(); ++f) {
    for (int i : mesh.faces[f]) incident[i].push_back(static_cast<int>(f));
  }
  const std::vector<Vec3> vn = mesh.vertex_normals();
  std::vector<Vec3> acc(nv, Vec3::Zero());
  std::vector<double> wsum(nv, 0.0);

  for (int v = 0; v < rig.size(); ++v) {
    const Camera& cam = rig.views[static_cast<std::size_t>(v)];
    const LatentField& img = images[static_cast<std::size_t>(v)];
    const FaceBins bins(mesh, cam);
    const Vec3 eye = cam.position();
    for (std::size_t i = 0; i < nv; ++i) {
      const Vec3& p = mesh.vertices[i];
      const Vec3 pr = cam.project(p);
      if (!(pr.z() > 1e-9) || pr.x() < 0.0 || pr.y() < 0.0 || pr.x() >= cam.width() || pr.y() >= cam.height()) continue;
      const Vec3 dir = (eye - p).normalized();
      const double facing = vn[i].dot(dir);
      if (!(facing > 0.0)) continue;
      const Vec3 seg = eye - p;
      bool blocked = false;
      bins.for_each(pr.x(), pr.y(), [&](int f) {
        if (blocked) return;
        if (std::find(incident[i].begin(), incident[i].end(), f) != incident[i].end()) return;
        const auto& fc = mesh.faces[static_cast<std::size_t>(f)];
        const double t = segment_crossing(p, seg, mesh.vertices[fc[0]], mesh.vertices[fc[1]], mesh.vertices[fc[2]]);
        if (t > kCrossEps && t < 1.0) blocked = true;
      });
      if (blocked) continue;
      const double w = facing * params.w_s + params.w_c;
      if (!(w > 0.0)) continue;
      for (int c = 0; c < 3; ++c) acc[i][c] += w * bilinear(img, c, pr.x() - 0.5, pr.y() - 0.5);
      wsum[i] += w;
    }
  }

  TriMesh out = mesh;
  out.colors.assign(nv, Vec3::Zero());
  // Multi-source Dijkstra from every colored vertex; (distance, source) order
  // makes ties go to the lower source index.
  using Item = std::tuple<double, int, int>;  // distance, source, vertex
  std::priority_queue<Item, std::vector<Item>, std::greater<>> pq;
  std::vector<double> dist(nv, kInf);
  std::vector<int> source(nv, -1);
  for (std::size_t i = 0; i < nv; ++i) {
    if (wsum[i] > 0.0) {
      out.colors[i] = acc[i] / wsum[i];
      dist[i] = 0.0;
      source[i] = static_cast<int>(i);
      pq.emplace(0.0, static_cast<int>(i), static_cast<int>(i));
    }
  }
  const auto nb = mesh.vertex_neighbors();
  while (!pq.empty()) {
    const auto [d, s, u] = pq.top();
    pq.pop();
    if (d > dist[u] || (d == dist[u] && s != source[u])) continue;
    for (int n : nb[u]) {
      const double nd = d + (mesh.vertices[u] - mesh.vertices[n]).norm();
      if (nd < dist[n] || (nd == dist[n] && s < source[n])) {
        dist[n] = nd;
        source[n] = s;
        pq.emplace(nd, s, n);
      }
    }
  }
  for (std::size_t i = 0; i < nv; ++i) {
    if (wsum[i] == 0.0 && source[i] >= 0) out.colors[i] = out.colors[source[i]];
  }
  return out;
}

LatentField render_vertex_colors(const TriMesh& mesh, const Camera& cam, double background) {
  if (mesh.colors.size() != mesh.vertices.size()) {
    throw ContractError(kModule, "render_vertex_colors needs one color per vertex");
  }
  const GBuffer g = rasterize(mesh, cam);
  LatentField img({3, g.height, g.width}, Space::image, background);
  for (int y = 0; y < g.height; ++y) {
    for (int x = 0; x < g.width; ++x) {
      const std::size_t idx = g.index(x, y);
      if (!g.mask[idx]) continue;
      const auto& f = mesh.faces[static_cast<std::size_t>(g.face[idx])];
      Vec3 c = Vec3::Zero();
      for (int k = 0; k < 3; ++k) c += g.bary[idx][k] * mesh.colors[f[k]];
      for (int ch = 0; ch < 3; ++ch) img.at(ch, y, x) = c[ch];
    }
  }
  return img;
}

BlendWeights heuristic_blend_weights(const std::array<Map2D, 2>& disparity, const std::array<Map2D, 2>& valid,
                                     const std::array<double, 2>& angle_rad, double tau) {
  if (!(tau > 0.0) || !std::isfinite(tau)) throw ContractError(kModule, "blend tau must be > 0");
  const int h = valid[0].height;
  const int w = valid[0].width;
  for (int k = 0; k < 2; ++k) {
    if (valid[k].height != h || valid[k].width != w || disparity[k].height != h || disparity[k].width != w) {
      throw ContractError(kModule, "blend weight inputs differ in size");
    }
  }
  const double a1 = std::max(std::cos(angle_rad[0]), 0.0);
  const double a2 = std::max(std::cos(angle_rad[1]), 0.0);
  BlendWeights out{Map2D(h, w), Map2D(h, w)};
  for (std::size_t i = 0; i < valid[0].size(); ++i) {
    const double w1 = valid[0].data[i] > 0.5 ? a1 * std::exp(-std::abs(disparity[0].data[i]) / tau) : 0.0;
    const double w2 = valid[1].data[i] > 0.5 ? a2 * std::exp(-std::abs(disparity[1].data[i]) / tau) : 0.0;
    const double s = w1 + w2;
    const double norm = s > 1.0 ? s : 1.0;
    out.w1.data[i] = w1 / norm;
    out.w2.data[i] = w2 / norm;
  }
  return out;
}

BlendWeights HeuristicWeightProvider::weights(const BlendStageInputs& in) const {
  const double range = in.depth_range > 0.0 ? in.depth_range : 1.0;
  return heuristic_blend_weights(in.disparity, in.valid, in.angle_rad, params_.tau_fraction * range);
}

std::array<int, 2> nearest_track_views(const ViewRig& rig, Track track, const Camera& novel) {
  std::vector<std::pair<double, int>> cand;
  const Vec3 axis = novel.optical_axis();
  for (int v = 0; v < rig.size(); ++v) {
    if (rig.tracks[static_cast<std::size_t>(v)] != track) continue;
    const double c = std::clamp(rig.views[static_cast<std::size_t>(v)].optical_axis().dot(axis), -1.0, 1.0);
    cand.emplace_back(std::acos(c), v);
  }
  if (cand.size() < 2) {
    throw ConfigError(kModule, std::string("novel-view blending needs two ") +
                                   (track == Track::full_body ? "full-body" : "upper-body") + " views, rig has " +
                                   std::to_string(cand.size()));
  }
  std::sort(cand.begin(), cand.end());
  return {cand[0].second, cand[1].second};
}

LatentField composite_stage(const LatentField& prev, const LatentField& i1, const LatentField& i2,
                            const BlendWeights& w) {
  require_same_shape(prev, i1, kModule, "composite source 1");
  require_same_shape(prev, i2, kModule, "composite source 2");
  const int h = prev.height();
  const int wd = prev.width();
  if (w.w1.height != h || w.w1.width != wd || w.w2.height != h || w.w2.width != wd) {
    throw ContractError(kModule, "blend weights do not match image " + to_string(prev.shape()));
  }
  constexpr double kSlack = 1e-9;
  LatentField out(prev.shape(), prev.space());
  const std::size_t plane = prev.shape().plane();
  for (std::size_t i = 0; i < plane; ++i) {
    const double a = w.w1.data[i];
    const double b = w.w2.data[i];
    if (!(a >= -kSlack) || !(b >= -kSlack) || !(a + b <= 1.0 + kSlack)) {
      throw ContractError(kModule, "blend weights out of range at pixel " + std::to_string(i));
    }
    const double rest = 1.0 - a - b;
    for (int c = 0; c < prev.channels(); ++c) {
      const std::size_t k = static_cast<std::size_t>(c) * plane + i;
      out[k] = a * i1[k] + b * i2[k] + rest * prev[k];
    }
  }
  return out;
}

NovelViewResult blend_novel_view(const TriMesh& mesh, const Camera& novel, const ViewRig& rig,
                                 const std::vector<LatentField>& images, const LatentField& base,
                                 const BlendWeightProvider& provider, const OcclusionParams& occ) {
  novel.validate();
  if (static_cast<int>(images.size()) != rig.size()) {
    throw ContractError(kModule, "novel-view blending needs one image per rig view");
  }
  const Shape out_shape{base.channels(), novel.height(), novel.width()};
  if (base.height() != novel.height() || base.width() != novel.width()) {
    throw ContractError(kModule, "base render " + to_string(base.shape()) + " does not match the novel camera");
  }
  const std::array<int, 2> fb = nearest_track_views(rig, Track::full_body, novel);
  const std::array<int, 2> ub = nearest_track_views(rig, Track::upper_body, novel);

  const GBuffer dst = rasterize(mesh, novel);
  double zmin = kInf, zmax = -kInf;
  for (std::size_t i = 0; i < dst.depth.size(); ++i) {
    if (!dst.mask[i]) continue;
    zmin = std::min(zmin, dst.depth[i]);
    zmax = std::max(zmax, dst.depth[i]);
  }
  const double range = zmax > zmin ? zmax - zmin : 0.0;
  const WarpTolerance tol{occ.abs_tol_factor * mesh.diagonal(), occ.rel_tol};

  NovelViewResult r;
  LatentField prev = base;
  const std::array<std::array<int, 2>, 2> stage_views{fb, ub};
  for (int s = 0; s < 2; ++s) {
    BlendStageInputs& in = r.stages[static_cast<std::size_t>(s)];
    in.views = stage_views[static_cast<std::size_t>(s)];
    in.depth_range = range;
    for (int k = 0; k < 2; ++k) {
      const int j = in.views[static_cast<std::size_t>(k)];
      const Camera& src_cam = rig.views[static_cast<std::size_t>(j)];
      const LatentField& img = images[static_cast<std::size_t>(j)];
      if (img.channels() != out_shape.channels) {
        throw ContractError(kModule, "rig image " + std::to_string(j) + " has " + std::to_string(img.channels()) +
                                         " channels, base render has " + std::to_string(out_shape.channels));
      }
      const GBuffer src = rasterize(mesh, src_cam);
      const WarpMap map = build_warp_map(dst, novel, src, src_cam, mesh, tol, occ.w_s, occ.w_c);
      WarpResult wr = apply_warp(img, map);
      in.warped[static_cast<std::size_t>(k)] = std::move(wr.image);
      in.valid[static_cast<std::size_t>(k)] = std::move(wr.mask);
      Map2D disp(novel.height(), novel.width());
      for (std::size_t i = 0; i < disp.size(); ++i) disp.data[i] = map.valid[i] ? map.disparity[i] : 0.0;
      in.disparity[static_cast<std::size_t>(k)] = std::move(disp);
      const double c = std::clamp(src_cam.optical_axis().dot(novel.optical_axis()), -1.0, 1.0);
      in.angle_rad[static_cast<std::size_t>(k)] = std::acos(c);
    }
    BlendWeights w = provider.weights(in);
    prev = composite_stage(prev, in.warped[0], in.warped[1], w);
    r.weights[static_cast<std::size_t>(s)] = std::move(w);
    if (s == 0) r.coarse = prev;
  }
  r.image = std::move(prev);
  return r;
}

}  // namespace mvd
