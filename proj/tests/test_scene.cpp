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

#include "doctest.h"

#include <cmath>
#include <filesystem>

#include "mvd/scene.hpp"
#include "oracles.hpp"

using namespace mvd;

namespace {

Camera front_camera(double dist, int res = 64, double vfov = 50.0) {
  return Camera::look_at({0, 0, dist}, {0, 0, 0}, {0, 1, 0}, vfov, res, res);
}

}  // namespace

TEST_CASE("rig spacing, pairing and validation") {
  RigParams p;
  p.per_track = 8;
  const ViewRig rig = build_rig(p);
  REQUIRE(rig.size() == 16);
  for (int i = 0; i < 8; ++i) {
    CHECK(rig.azimuths_deg[i] == doctest::Approx(45.0 * i));
    CHECK(rig.azimuths_deg[i] == rig.azimuths_deg[i + 8]);
    CHECK(rig.is_full_body(i));
    CHECK_FALSE(rig.is_full_body(i + 8));
  }
  for (const auto& cam : rig.views) CHECK_NOTHROW(cam.validate());
  // Azimuth 0 sits on +z looking toward the target.
  CHECK(rig.views[0].position().z() == doctest::Approx(p.radius_fb));
  CHECK(rig.views[0].optical_axis().z() == doctest::Approx(-1.0));

  p.per_track = 4;
  const ViewRig four = build_rig(p);
  CHECK(four.azimuths_deg == std::vector<double>{0.0, 90.0, 180.0, 270.0, 0.0, 90.0, 180.0, 270.0});

  p.per_track = 2;
  CHECK_THROWS_AS(build_rig(p), ConfigError);
  p.per_track = 8;
  p.radius_ub = 0.0;
  CHECK_THROWS_AS(build_rig(p), ConfigError);
}

TEST_CASE("neighbors follow the 60 degree window") {
  RigParams p;
  const ViewRig rig = build_rig(p);
  CHECK(neighbors(rig, 0) == std::vector<int>{1, 7, 8});
  CHECK(neighbors(rig, 8) == std::vector<int>{9, 15});
  CHECK(neighbors(rig, 3) == std::vector<int>{2, 4, 11});
  p.per_track = 6;
  const ViewRig six = build_rig(p);
  CHECK(neighbors(six, 0) == std::vector<int>{1, 5, 6});
  CHECK(neighbors(six, 6) == std::vector<int>{7, 11});
}

TEST_CASE("framing keeps the whole mesh inside full-body views") {
  const TriMesh m = make_icosphere(2, 0.8, {0.1, 0.4, -0.2});
  const ViewRig rig = build_rig(frame_rig(m, 8, 50.0, 64, 64));
  for (int i = 0; i < 8; ++i) {
    for (const auto& v : m.vertices) {
      const Vec3 p = rig.views[i].project(v);
      CHECK(p.z() > 0.0);
      CHECK(p.x() >= 0.0);
      CHECK(p.x() <= 64.0);
      CHECK(p.y() >= 0.0);
      CHECK(p.y() <= 64.0);
    }
  }
}

TEST_CASE("sphere center depth matches analytic ray intersection") {
  const TriMesh m = make_icosphere(4, 1.0);
  const Camera cam = front_camera(3.0, 64);
  const GBuffer g = rasterize(m, cam);
  const std::size_t c = g.index(32, 32);
  REQUIRE(g.mask[c]);
  // Analytic ray/sphere hit along the center pixel ray.
  const Vec3 d = cam.pixel_ray(32, 32);
  const Vec3 o = cam.position();
  const double a = d.squaredNorm(), b = 2 * o.dot(d), cc = o.squaredNorm() - 1.0;
  const double t = (-b - std::sqrt(b * b - 4 * a * cc)) / (2 * a);
  const double half_footprint = 0.5 * t / cam.intrinsics.fy;
  CHECK(std::abs(g.depth[c] - t) <= half_footprint);
  CHECK(std::abs(g.depth[c] - 2.0) <= half_footprint);
}

TEST_CASE("camera facing away sees nothing") {
  const TriMesh m = make_icosphere(2);
  const Camera cam = Camera::look_at({0, 0, 3}, {0, 0, 6}, {0, 1, 0}, 50, 32, 32);
  const GBuffer g = rasterize(m, cam);
  for (auto v : g.mask) CHECK(v == 0);
}

TEST_CASE("front-facing square has constant depth and faces the camera") {
  const TriMesh q = make_quad(0.5, 0.0);
  const Camera cam = front_camera(2.0, 32);
  const GBuffer g = rasterize(q, cam);
  int covered = 0;
  for (std::size_t i = 0; i < g.mask.size(); ++i) {
    if (!g.mask[i]) continue;
    ++covered;
    CHECK(g.depth[i] == doctest::Approx(2.0).epsilon(1e-12));
    CHECK((g.normal[i] + cam.optical_axis()).norm() < 1e-12);
  }
  CHECK(covered > 50);
}

TEST_CASE("rasterizer matches exhaustive ray casting") {
  std::mt19937_64 rng(42);
  for (int trial = 0; trial < 6; ++trial) {
    const TriMesh m = mvd::testing::random_soup(40 + 30 * trial, rng);
    const Camera cam = Camera::look_at({0.3 * trial - 0.5, 0.2, 3.0}, {0, 0, 0}, {0, 1, 0}, 55, 64, 64);
    const GBuffer g = rasterize(m, cam);
    const auto ref = mvd::testing::raycast_all(m, cam);
    for (std::size_t i = 0; i < ref.size(); ++i) {
      REQUIRE(g.face[i] == ref[i].face);
      if (ref[i].face >= 0) REQUIRE(std::abs(g.depth[i] - ref[i].depth) <= 1e-5);
      REQUIRE(static_cast<bool>(g.mask[i]) == (ref[i].face >= 0));
    }
  }
}

TEST_CASE("hit points reproject to their pixel centers") {
  const TriMesh m = make_icosphere(3, 1.0);
  const Camera cam = Camera::look_at({1.5, 1.0, 2.5}, {0, 0, 0}, {0, 1, 0}, 50, 64, 64);
  const GBuffer g = rasterize(m, cam, RasterOptions{true});
  for (int y = 0; y < 64; ++y) {
    for (int x = 0; x < 64; ++x) {
      const std::size_t i = g.index(x, y);
      if (!g.mask[i]) continue;
      const Vec3 p = cam.project(g.hit[i]);
      CHECK(std::abs(p.x() - (x + 0.5)) <= 0.5);
      CHECK(std::abs(p.y() - (y + 0.5)) <= 0.5);
      CHECK(std::abs(g.normal[i].norm() - 1.0) <= 1e-4);
    }
  }
}

TEST_CASE("condition maps") {
  SUBCASE("empty coverage is black") {
    const Camera cam = Camera::look_at({0, 0, 3}, {0, 0, 6}, {0, 1, 0}, 50, 16, 16);
    const auto c = render_conditions(make_icosphere(1), cam);
    for (double v : c.depth.storage()) CHECK(v == 0.0);
    for (double v : c.normal.storage()) CHECK(v == 0.0);
  }
  SUBCASE("front-facing plane encodes as (0.5, 0.5, 1)") {
    const Camera cam = front_camera(2.0, 16);
    const auto c = render_conditions(make_quad(0.5, 0.0), cam);
    CHECK(c.normal.at(0, 8, 8) == doctest::Approx(0.5));
    CHECK(c.normal.at(1, 8, 8) == doctest::Approx(0.5));
    CHECK(c.normal.at(2, 8, 8) == doctest::Approx(1.0));
  }
  SUBCASE("farther plane maps to larger depth") {
    TriMesh m = make_quad(0.3, 0.0);
    for (auto& v : m.vertices) v.x() -= 0.4;
    TriMesh far = make_quad(0.3, -1.0);
    for (auto& v : far.vertices) v.x() += 0.4;
    const int base = static_cast<int>(m.vertices.size());
    m.vertices.insert(m.vertices.end(), far.vertices.begin(), far.vertices.end());
    for (auto f : far.faces) m.faces.push_back({f[0] + base, f[1] + base, f[2] + base});
    const Camera cam = front_camera(3.0, 64);
    const auto c = render_conditions(m, cam);
    const Vec3 pn = cam.project({-0.4, 0.0, 0.0});
    const Vec3 pf = cam.project({0.4, 0.0, -1.0});
    const double dn = c.depth.at(0, static_cast<int>(pn.y()), static_cast<int>(pn.x()));
    const double df = c.depth.at(0, static_cast<int>(pf.y()), static_cast<int>(pf.x()));
    CHECK(df > dn);
  }
}

TEST_CASE("mesh validation and OBJ round trip") {
  TriMesh bad = make_quad(1.0, 0.0);
  bad.faces.push_back({0, 0, 1});
  CHECK_THROWS_AS(bad.validate(), ConfigError);
  bad.faces.back() = {0, 1, 9};
  CHECK_THROWS_AS(bad.validate(), ConfigError);

  TriMesh m = make_icosphere(1, 0.7);
  m.colors.assign(m.vertices.size(), Vec3(0.25, 0.5, 0.75));
  const auto path = std::filesystem::temp_directory_path() / "mvd_scene_roundtrip.obj";
  write_obj(path, m);
  const TriMesh r = read_obj(path);
  std::filesystem::remove(path);
  REQUIRE(r.vertices.size() == m.vertices.size());
  REQUIRE(r.faces == m.faces);
  for (std::size_t i = 0; i < m.vertices.size(); ++i) {
    CHECK(r.vertices[i] == m.vertices[i]);
    CHECK(r.colors[i] == m.colors[i]);
  }
}

TEST_CASE("icosphere normals point outward") {
  const TriMesh m = make_icosphere(2, 1.0);
  for (const auto& f : m.faces) {
    const Vec3 c = (m.vertices[f[0]] + m.vertices[f[1]] + m.vertices[f[2]]) / 3.0;
    const Vec3 n = (m.vertices[f[1]] - m.vertices[f[0]]).cross(m.vertices[f[2]] - m.vertices[f[0]]);
    CHECK(n.dot(c) > 0.0);
  }
}
