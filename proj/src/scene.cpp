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

#include "mvd/scene.hpp"

#include <algorithm>
#include <cmath>
#include <fstream>
#include <iomanip>
#include <limits>
#include <map>
#include <numbers>
#include <sstream>
#include <string>

namespace mvd {
namespace {

constexpr const char* kModule = "scene";
constexpr double kInf = std::numeric_limits<double>::infinity();

double deg2rad(double d) { return d * std::numbers::pi / 180.0; }

double azimuth_distance(double a, double b) {
  double d = std::fmod(std::abs(a - b), 360.0);
  return std::min(d, 360.0 - d);
}

double edge(const Vec2& a, const Vec2& b, const Vec2& p) {
  return (b.x() - a.x()) * (p.y() - a.y()) - (b.y() - a.y()) * (p.x() - a.x());
}

}  // namespace

void TriMesh::validate() const {
  const int n = static_cast<int>(vertices.size());
  for (const auto& v : vertices) {
    if (!v.allFinite()) throw ConfigError(kModule, "mesh has non-finite vertex coordinates");
  }
  for (std::size_t f = 0; f < faces.size(); ++f) {
    const auto& t = faces[f];
    for (int i : t) {
      if (i < 0 || i >= n) throw ConfigError(kModule, "face " + std::to_string(f) + " index out of range");
    }
    if (t[0] == t[1] || t[1] == t[2] || t[0] == t[2]) {
      throw ConfigError(kModule, "face " + std::to_string(f) + " is degenerate");
    }
  }
  if (!colors.empty() && colors.size() != vertices.size()) {
    throw ConfigError(kModule, "vertex color count does not match vertex count");
  }
}

Vec3 TriMesh::bbox_min() const {
  Vec3 m = Vec3::Constant(kInf);
  for (const auto& v : vertices) m = m.cwiseMin(v);
  return m;
}

Vec3 TriMesh::bbox_max() const {
  Vec3 m = Vec3::Constant(-kInf);
  for (const auto& v : vertices) m = m.cwiseMax(v);
  return m;
}

double TriMesh::diagonal() const {
  if (vertices.empty()) return 0.0;
  return (bbox_max() - bbox_min()).norm();
}

std::vector<Vec3> TriMesh::vertex_normals() const {
  std::vector<Vec3> n(vertices.size(), Vec3::Zero());
  for (const auto& f : faces) {
    const Vec3 c = (vertices[f[1]] - vertices[f[0]]).cross(vertices[f[2]] - vertices[f[0]]);
    for (int i : f) n[i] += c;
  }
  for (auto& v : n) {
    const double len = v.norm();
    if (len > 0.0) v /= len;
  }
  return n;
}

std::vector<std::vector<int>> TriMesh::vertex_neighbors() const {
  std::vector<std::vector<int>> adj(vertices.size());
  for (const auto& f : faces) {
    for (int a = 0; a < 3; ++a) {
      adj[f[a]].push_back(f[(a + 1) % 3]);
      adj[f[a]].push_back(f[(a + 2) % 3]);
    }
  }
  for (auto& a : adj) {
    std::sort(a.begin(), a.end());
    a.erase(std::unique(a.begin(), a.end()), a.end());
  }
  return adj;
}

TriMesh make_icosphere(int subdivisions, double radius, const Vec3& center) {
  const double t = (1.0 + std::sqrt(5.0)) / 2.0;
  std::vector<Vec3> v = {{-1, t, 0},  {1, t, 0},  {-1, -t, 0}, {1, -t, 0},
                         {0, -1, t},  {0, 1, t},  {0, -1, -t}, {0, 1, -t},
                         {t, 0, -1},  {t, 0, 1},  {-t, 0, -1}, {-t, 0, 1}};
  for (auto& p : v) p.normalize();
  std::vector<std::array<int, 3>> f = {{0, 11, 5}, {0, 5, 1},   {0, 1, 7},   {0, 7, 10}, {0, 10, 11},
                                       {1, 5, 9},  {5, 11, 4},  {11, 10, 2}, {10, 7, 6}, {7, 1, 8},
                                       {3, 9, 4},  {3, 4, 2},   {3, 2, 6},   {3, 6, 8},  {3, 8, 9},
                                       {4, 9, 5},  {2, 4, 11},  {6, 2, 10},  {8, 6, 7},  {9, 8, 1}};
  for (int s = 0; s < subdivisions; ++s) {
    std::map<std::pair<int, int>, int> mid;
    auto midpoint = [&](int a, int b) {
      const auto key = std::minmax(a, b);
      auto it = mid.find(key);
      if (it != mid.end()) return it->second;
      v.push_back((v[a] + v[b]).normalized());
      const int idx = static_cast<int>(v.size()) - 1;
      mid.emplace(key, idx);
      return idx;
    };
    std::vector<std::array<int, 3>> next;
    next.reserve(f.size() * 4);
    for (const auto& tri : f) {
      const int a = midpoint(tri[0], tri[1]);
      const int b = midpoint(tri[1], tri[2]);
      const int c = midpoint(tri[2], tri[0]);
      next.push_back({tri[0], a, c});
      next.push_back({tri[1], b, a});
      next.push_back({tri[2], c, b});
      next.push_back({a, b, c});
    }
    f = std::move(next);
  }
  TriMesh m;
  m.vertices.reserve(v.size());
  for (const auto& p : v) m.vertices.push_back(center + radius * p);
  m.faces = std::move(f);
  return m;
}

TriMesh make_quad(double half_size, double z) {
  TriMesh m;
  const double h = half_size;
  m.vertices = {{-h, -h, z}, {h, -h, z}, {h, h, z}, {-h, h, z}};
  m.faces = {{0, 1, 2}, {0, 2, 3}};
  return m;
}

TriMesh read_obj(const std::filesystem::path& path) {
  std::ifstream in(path);
  if (!in) throw ConfigError(kModule, "cannot open mesh " + path.string());
  TriMesh m;
  bool any_color = false;
  std::string line;
  int line_no = 0;
  while (std::getline(in, line)) {
    ++line_no;
    std::istringstream ss(line);
    std::string tag;
    if (!(ss >> tag)) continue;
    if (tag == "v") {
      double x, y, z;
      if (!(ss >> x >> y >> z)) throw ConfigError(kModule, path.string() + ":" + std::to_string(line_no) + ": bad vertex");
      m.vertices.emplace_back(x, y, z);
      double r, g, b;
      if (ss >> r >> g >> b) {
        m.colors.emplace_back(r, g, b);
        any_color = true;
      } else {
        m.colors.emplace_back(Vec3::Zero());
      }
    } else if (tag == "f") {
      std::vector<int> idx;
      std::string tok;
      while (ss >> tok) {
        const int i = std::stoi(tok.substr(0, tok.find('/')));
        idx.push_back(i < 0 ? static_cast<int>(m.vertices.size()) + i : i - 1);
      }
      if (idx.size() < 3) throw ConfigError(kModule, path.string() + ":" + std::to_string(line_no) + ": face needs 3 vertices");
      for (std::size_t k = 1; k + 1 < idx.size(); ++k) m.faces.push_back({idx[0], idx[k], idx[k + 1]});
    }
  }
  if (!any_color) m.colors.clear();
  m.validate();
  return m;
}

void write_obj(const std::filesystem::path& path, const TriMesh& mesh) {
  std::ofstream out(path);
  if (!out) throw RuntimeError(kModule, "cannot write mesh " + path.string());
  out << std::setprecision(17);
  for (std::size_t i = 0; i < mesh.vertices.size(); ++i) {
    const Vec3& v = mesh.vertices[i];
    out << "v " << v.x() << ' ' << v.y() << ' ' << v.z();
    if (!mesh.colors.empty()) {
      const Vec3& c = mesh.colors[i];
      out << ' ' << c.x() << ' ' << c.y() << ' ' << c.z();
    }
    out << '\n';
  }
  for (const auto& f : mesh.faces) out << "f " << f[0] + 1 << ' ' << f[1] + 1 << ' ' << f[2] + 1 << '\n';
}

Camera Camera::look_at(const Vec3& eye, const Vec3& target, const Vec3& up, double vfov_deg,
                       int width, int height) {
  const Vec3 fwd = (target - eye).normalized();
  Vec3 right = fwd.cross(up);
  if (right.norm() < 1e-12) right = fwd.cross(Vec3::UnitZ());
  right.normalize();
  const Vec3 down = fwd.cross(right);
  Camera c;
  c.rotation.row(0) = right.transpose();
  c.rotation.row(1) = down.transpose();
  c.rotation.row(2) = fwd.transpose();
  c.translation = -c.rotation * eye;
  const double f = 0.5 * height / std::tan(deg2rad(vfov_deg) / 2.0);
  c.intrinsics = Intrinsics{f, f, 0.5 * width, 0.5 * height, width, height};
  return c;
}

void Camera::validate() const {
  if (!(intrinsics.fx > 0.0 && intrinsics.fy > 0.0)) throw ConfigError(kModule, "focal lengths must be > 0");
  if (intrinsics.width <= 0 || intrinsics.height <= 0) throw ConfigError(kModule, "image size must be positive");
  if ((rotation * rotation.transpose() - Mat3::Identity()).cwiseAbs().maxCoeff() > 1e-6) {
    throw ConfigError(kModule, "camera rotation is not orthonormal");
  }
}

Vec3 Camera::project(const Vec3& world) const {
  const Vec3 p = to_camera(world);
  return {intrinsics.fx * p.x() / p.z() + intrinsics.cx, intrinsics.fy * p.y() / p.z() + intrinsics.cy,
          p.z()};
}

Vec3 Camera::pixel_ray(int px, int py) const {
  const Vec3 d((px + 0.5 - intrinsics.cx) / intrinsics.fx, (py + 0.5 - intrinsics.cy) / intrinsics.fy, 1.0);
  return rotation.transpose() * d;
}

ViewRig build_rig(const RigParams& p) {
  if (p.per_track < 3) throw ConfigError(kModule, "rig needs N >= 3 views per track, got " + std::to_string(p.per_track));
  if (!(p.radius_fb > 0.0) || !(p.radius_ub > 0.0)) throw ConfigError(kModule, "rig radii must be > 0");
  ViewRig rig;
  rig.per_track = p.per_track;
  const Vec3 up = Vec3::UnitY();
  for (int track = 0; track < 2; ++track) {
    const Vec3& target = track == 0 ? p.target_fb : p.target_ub;
    const double r = track == 0 ? p.radius_fb : p.radius_ub;
    const double el = deg2rad(track == 0 ? p.elevation_fb_deg : p.elevation_ub_deg);
    for (int k = 0; k < p.per_track; ++k) {
      const double az = 360.0 * k / p.per_track;
      const double a = deg2rad(az);
      const Vec3 dir(std::cos(el) * std::sin(a), std::sin(el), std::cos(el) * std::cos(a));
      rig.views.push_back(Camera::look_at(target + r * dir, target, up, p.vfov_deg, p.width, p.height));
      rig.tracks.push_back(track == 0 ? Track::full_body : Track::upper_body);
      rig.azimuths_deg.push_back(az);
    }
  }
  return rig;
}

RigParams frame_rig(const TriMesh& mesh, int per_track, double vfov_deg, int width, int height,
                    double upper_fraction, double elevation_deg, double margin) {
  if (mesh.vertices.empty()) throw ConfigError(kModule, "cannot frame an empty mesh");
  if (!(upper_fraction > 0.0 && upper_fraction <= 1.0)) throw ConfigError(kModule, "upper_fraction must be in (0,1]");
  const Vec3 lo = mesh.bbox_min();
  const Vec3 hi = mesh.bbox_max();
  const double tan_half = std::tan(deg2rad(vfov_deg) / 2.0) * std::min(1.0, static_cast<double>(width) / height);

  auto fit = [&](const Vec3& blo, const Vec3& bhi, const Vec3& target) {
    // Radial extent about the vertical axis bounds the box from every azimuth.
    double radial = 0.0;
    for (double x : {blo.x(), bhi.x()}) {
      for (double z : {blo.z(), bhi.z()}) radial = std::max(radial, std::hypot(x - target.x(), z - target.z()));
    }
    const double half_h = 0.5 * (bhi.y() - blo.y());
    return margin * (std::max(half_h, radial) / tan_half + radial);
  };

  RigParams p;
  p.per_track = per_track;
  p.vfov_deg = vfov_deg;
  p.width = width;
  p.height = height;
  p.elevation_fb_deg = elevation_deg;
  p.elevation_ub_deg = elevation_deg;
  p.target_fb = 0.5 * (lo + hi);
  p.radius_fb = fit(lo, hi, p.target_fb);
  Vec3 ulo = lo;
  ulo.y() = hi.y() - upper_fraction * (hi.y() - lo.y());
  p.target_ub = 0.5 * (ulo + hi);
  p.radius_ub = fit(ulo, hi, p.target_ub);
  return p;
}

std::vector<int> neighbors(const ViewRig& rig, int i, double range_deg) {
  if (i < 0 || i >= rig.size()) throw ContractError(kModule, "view index out of range");
  const int n = rig.per_track;
  const int base = rig.is_full_body(i) ? 0 : n;
  std::vector<std::pair<double, int>> cand;
  for (int j = base; j < base + n; ++j) {
    if (j == i) continue;
    const double d = azimuth_distance(rig.azimuths_deg[i], rig.azimuths_deg[j]);
    if (d <= range_deg + 1e-9) cand.emplace_back(d, j);
  }
  std::sort(cand.begin(), cand.end());
  std::vector<int> out;
  for (const auto& c : cand) out.push_back(c.second);
  if (rig.is_full_body(i) && i + n < rig.size()) out.push_back(i + n);
  return out;
}

GBuffer rasterize(const TriMesh& mesh, const Camera& cam, const RasterOptions& opts) {
  const int w = cam.width();
  const int h = cam.height();
  GBuffer g;
  g.width = w;
  g.height = h;
  const std::size_t n = static_cast<std::size_t>(w) * h;
  g.depth.assign(n, kInf);
  g.normal.assign(n, Vec3::Zero());
  g.mask.assign(n, 0);
  g.hit.assign(n, Vec3::Zero());
  g.face.assign(n, -1);
  g.bary.assign(n, Vec3::Zero());

  std::vector<Vec3> cv(mesh.vertices.size());
  for (std::size_t i = 0; i < cv.size(); ++i) cv[i] = cam.to_camera(mesh.vertices[i]);
  const auto& K = cam.intrinsics;

  auto write = [&](std::size_t idx, double z, int f, const Vec3& b) {
    if (z < g.depth[idx]) {
      g.depth[idx] = z;
      g.face[idx] = f;
      g.bary[idx] = b;
    }
  };

  for (std::size_t fi = 0; fi < mesh.faces.size(); ++fi) {
    const auto& f = mesh.faces[fi];
    const Vec3& p0 = cv[f[0]];
    const Vec3& p1 = cv[f[1]];
    const Vec3& p2 = cv[f[2]];
    const int face = static_cast<int>(fi);
    if (p0.z() <= opts.near && p1.z() <= opts.near && p2.z() <= opts.near) continue;

    if (p0.z() <= opts.near || p1.z() <= opts.near || p2.z() <= opts.near) {
      // Crosses the near plane: intersect pixel rays directly in camera space.
      const Vec3 e1 = p1 - p0;
      const Vec3 e2 = p2 - p0;
      for (int py = 0; py < h; ++py) {
        for (int px = 0; px < w; ++px) {
          const Vec3 d((px + 0.5 - K.cx) / K.fx, (py + 0.5 - K.cy) / K.fy, 1.0);
          const Vec3 pv = d.cross(e2);
          const double det = e1.dot(pv);
          if (det == 0.0) continue;
          const Vec3 tv = -p0;
          const double u = tv.dot(pv) / det;
          if (u < 0.0 || u > 1.0) continue;
          const Vec3 qv = tv.cross(e1);
          const double v = d.dot(qv) / det;
          if (v < 0.0 || u + v > 1.0) continue;
          const double z = e2.dot(qv) / det;
          if (z <= opts.near) continue;
          write(g.index(px, py), z, face, Vec3(1.0 - u - v, u, v));
        }
      }
      continue;
    }

    const Vec2 s0(K.fx * p0.x() / p0.z() + K.cx, K.fy * p0.y() / p0.z() + K.cy);
    const Vec2 s1(K.fx * p1.x() / p1.z() + K.cx, K.fy * p1.y() / p1.z() + K.cy);
    const Vec2 s2(K.fx * p2.x() / p2.z() + K.cx, K.fy * p2.y() / p2.z() + K.cy);
    const double area = edge(s0, s1, s2);
    if (area == 0.0 || !std::isfinite(area)) continue;

    const double umin = std::min({s0.x(), s1.x(), s2.x()});
    const double umax = std::max({s0.x(), s1.x(), s2.x()});
    const double vmin = std::min({s0.y(), s1.y(), s2.y()});
    const double vmax = std::max({s0.y(), s1.y(), s2.y()});
    const int x0 = std::max(0, static_cast<int>(std::ceil(umin - 0.5)));
    const int x1 = std::min(w - 1, static_cast<int>(std::floor(umax - 0.5)));
    const int y0 = std::max(0, static_cast<int>(std::ceil(vmin - 0.5)));
    const int y1 = std::min(h - 1, static_cast<int>(std::floor(vmax - 0.5)));

    for (int py = y0; py <= y1; ++py) {
      for (int px = x0; px <= x1; ++px) {
        const Vec2 p(px + 0.5, py + 0.5);
        const double l0 = edge(s1, s2, p) / area;
        const double l1 = edge(s2, s0, p) / area;
        const double l2 = edge(s0, s1, p) / area;
        if (l0 < 0.0 || l1 < 0.0 || l2 < 0.0) continue;
        const double q0 = l0 / p0.z();
        const double q1 = l1 / p1.z();
        const double q2 = l2 / p2.z();
        const double sum = q0 + q1 + q2;
        const double z = 1.0 / sum;
        write(g.index(px, py), z, face, Vec3(q0 * z, q1 * z, q2 * z));
      }
    }
  }

  std::vector<Vec3> vn;
  if (opts.smooth_normals) vn = mesh.vertex_normals();
  for (std::size_t idx = 0; idx < n; ++idx) {
    const int fi = g.face[idx];
    if (fi < 0) continue;
    const auto& f = mesh.faces[static_cast<std::size_t>(fi)];
    const Vec3& b = g.bary[idx];
    const Vec3& a = mesh.vertices[f[0]];
    const Vec3& bb = mesh.vertices[f[1]];
    const Vec3& c = mesh.vertices[f[2]];
    g.hit[idx] = b[0] * a + b[1] * bb + b[2] * c;
    Vec3 nrm = opts.smooth_normals ? Vec3(b[0] * vn[f[0]] + b[1] * vn[f[1]] + b[2] * vn[f[2]])
                                   : Vec3((bb - a).cross(c - a));
    const double len = nrm.norm();
    if (!(len > 0.0)) {
      g.depth[idx] = kInf;
      g.face[idx] = -1;
      continue;
    }
    g.normal[idx] = nrm / len;
    g.mask[idx] = 1;
  }
  return g;
}

ConditionMaps render_conditions(const TriMesh& mesh, const Camera& cam) {
  const GBuffer g = rasterize(mesh, cam);
  const int w = g.width;
  const int h = g.height;
  ConditionMaps out{LatentField({1, h, w}, Space::image), LatentField({3, h, w}, Space::image)};

  double zmin = kInf;
  double zmax = -kInf;
  for (const auto& v : mesh.vertices) {
    const double z = cam.to_camera(v).z();
    if (z <= 0.0) continue;
    zmin = std::min(zmin, z);
    zmax = std::max(zmax, z);
  }
  const double range = zmax - zmin;
  for (int y = 0; y < h; ++y) {
    for (int x = 0; x < w; ++x) {
      const std::size_t idx = g.index(x, y);
      if (!g.mask[idx]) continue;
      out.depth.at(0, y, x) = range > 0.0 ? std::clamp((g.depth[idx] - zmin) / range, 0.0, 1.0) : 0.0;
      const Vec3 nc = cam.rotation * g.normal[idx];
      // Camera frame is y-down / z-forward; export y-up / z-toward-viewer.
      const Vec3 ne(nc.x(), -nc.y(), -nc.z());
      for (int c = 0; c < 3; ++c) out.normal.at(c, y, x) = ne[c] * 0.5 + 0.5;
    }
  }
  return out;
}

}  // namespace mvd
