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

#include <unistd.h>

#include <cmath>
#include <cstring>
#include <filesystem>
#include <random>
#include <sstream>

#include "doctest.h"
#include "mvd/io.hpp"
#include "mvd/metrics.hpp"
#include "mvd/scenario.hpp"
#include "test_util.hpp"

namespace mvd {
namespace {

namespace fs = std::filesystem;

fs::path scratch_dir(const std::string& name) {
  const fs::path p = fs::temp_directory_path() / ("mvd_metrics_" + std::to_string(::getpid()) + "_" + name);
  fs::remove_all(p);
  fs::create_directories(p);
  return p;
}

// Direct 11x11 window sums, no separability, masked normalization.
double ssim_bruteforce(const LatentField& a, const LatentField& b, const Map2D* mask) {
  const double c1 = 1e-4, c2 = 9e-4;
  double total = 0.0;
  int count = 0;
  for (int c = 0; c < a.channels(); ++c) {
    for (int y = 0; y < a.height(); ++y) {
      for (int x = 0; x < a.width(); ++x) {
        if (mask && (*mask)(y, x) <= 0) continue;
        double sw = 0, sa = 0, sb = 0, saa = 0, sbb = 0, sab = 0;
        for (int dy = -5; dy <= 5; ++dy) {
          for (int dx = -5; dx <= 5; ++dx) {
            const int yy = y + dy, xx = x + dx;
            if (yy < 0 || xx < 0 || yy >= a.height() || xx >= a.width()) continue;
            if (mask && (*mask)(yy, xx) <= 0) continue;
            const double w = std::exp(-(dx * dx + dy * dy) / (2 * 1.5 * 1.5));
            const double u = a.at(c, yy, xx), v = b.at(c, yy, xx);
            sw += w;
            sa += w * u;
            sb += w * v;
            saa += w * u * u;
            sbb += w * v * v;
            sab += w * u * v;
          }
        }
        const double ma = sa / sw, mb = sb / sw;
        const double va = std::max(0.0, saa / sw - ma * ma), vb = std::max(0.0, sbb / sw - mb * mb);
        const double cov = sab / sw - ma * mb;
        total += ((2 * ma * mb + c1) * (2 * cov + c2)) / ((ma * ma + mb * mb + c1) * (va + vb + c2));
        ++count;
      }
    }
  }
  return total / count;
}

// Geometry whose pair (0 -> 1) never overlaps.
class PartialGeometry final : public ViewGeometry {
 public:
  int num_views() const override { return 3; }
  int image_width() const override { return 8; }
  int image_height() const override { return 8; }
  std::vector<int> sources(int i) const override {
    std::vector<int> s;
    for (int v = 0; v < 3; ++v)
      if (v != i) s.push_back(v);
    return s;
  }
  int closeup_source(int) const override { return -1; }
  WarpResult warp(const LatentField& src, int from, int to) const override {
    WarpResult r{src, Map2D(8, 8, (from == 0 && to == 1) ? 0.0 : 1.0)};
    return r;
  }
  LatentField warp_adjoint(const LatentField& g, int, int) const override { return g; }
  Map2D occlusion(int, int) const override { return Map2D(8, 8, 1.0); }
};

TEST_CASE("psnr: zero error reports the cap") {
  std::mt19937_64 rng(1);
  const LatentField a = testing::random_field({3, 16, 16}, rng, 0, 1, Space::image);
  CHECK(psnr(a, a) == kPsnrCap);
  CHECK(psnr(a, a, nullptr, 60.0) == 60.0);
}

TEST_CASE("psnr: uniform noise matches the closed form from its rms") {
  std::mt19937_64 rng(7);
  const double amp = 0.05;
  const LatentField a = testing::random_field({3, 128, 128}, rng, 0.2, 0.8, Space::image);
  LatentField b = a;
  std::uniform_real_distribution<double> u(-amp, amp);
  double sq = 0.0;
  for (std::size_t i = 0; i < b.size(); ++i) {
    const double d = u(rng);
    b[i] += d;
    sq += d * d;
  }
  const double rms = std::sqrt(sq / static_cast<double>(b.size()));
  CHECK(psnr(a, b) == doctest::Approx(20.0 * std::log10(1.0 / rms)).epsilon(1e-12));
  // Uniform noise on [-a, a] has rms a / sqrt(3).
  CHECK(std::abs(psnr(a, b) - 20.0 * std::log10(std::sqrt(3.0) / amp)) < 0.1);
}

TEST_CASE("psnr: only masked pixels count") {
  LatentField a({1, 2, 2}, Space::image, 0.5);
  LatentField b = a;
  b.at(0, 0, 0) = 0.0;  // outside the mask
  b.at(0, 1, 1) = 0.6;
  Map2D m(2, 2, 1.0);
  m(0, 0) = 0.0;
  // mse = 0.01 / 3
  CHECK(psnr(a, b, &m) == doctest::Approx(-10.0 * std::log10(0.01 / 3.0)).epsilon(1e-12));
  const Map2D none(2, 2, 0.0);
  CHECK_THROWS_AS(psnr(a, b, &none), ContractError);
  CHECK_THROWS_AS(psnr(a, LatentField({1, 2, 3}, Space::image)), ContractError);
}

TEST_CASE("ssim: identity, constant offset closed form, brute-force agreement") {
  std::mt19937_64 rng(3);
  const LatentField a = testing::random_field({3, 24, 20}, rng, 0, 1, Space::image);
  CHECK(std::abs(ssim(a, a) - 1.0) < 1e-12);

  // Flat images: variances vanish, leaving the luminance term.
  const LatentField f({1, 16, 16}, Space::image, 0.5), g({1, 16, 16}, Space::image, 0.6);
  CHECK(ssim(f, g) == doctest::Approx((2 * 0.5 * 0.6 + 1e-4) / (0.25 + 0.36 + 1e-4)).epsilon(1e-12));

  LatentField b = a;
  for (auto& v : b.storage()) v = 0.7 * v + 0.1 * std::sin(31.0 * v);
  Map2D mask(24, 20, 1.0);
  for (int y = 0; y < 24; ++y)
    for (int x = 0; x < 20; ++x)
      if ((x - 10) * (x - 10) + (y - 12) * (y - 12) > 64) mask(y, x) = 0.0;
  CHECK(ssim(a, b) == doctest::Approx(ssim_bruteforce(a, b, nullptr)).epsilon(1e-10));
  CHECK(ssim(a, b, &mask) == doctest::Approx(ssim_bruteforce(a, b, &mask)).epsilon(1e-10));
}

TEST_CASE("cross-view consistency: identical images under identity warps") {
  std::mt19937_64 rng(5);
  const LatentField img = testing::random_field({3, 16, 16}, rng, 0, 1, Space::image);
  IdentityGeometry geo(4, 16, 16);
  const MetricsReport r = cross_view_consistency({img, img, img, img}, geo, 2);
  CHECK(r.pairs.size() == 12);
  CHECK(r.empty_pairs.empty());
  CHECK(r.mean_psnr == kPsnrCap);
  CHECK(std::abs(r.mean_ssim - 1.0) < 1e-12);
  CHECK_THROWS_AS(cross_view_consistency({img}, geo), ContractError);
}

TEST_CASE("cross-view consistency: empty overlaps are excluded and listed") {
  std::mt19937_64 rng(6);
  std::vector<LatentField> imgs;
  for (int v = 0; v < 3; ++v) imgs.push_back(testing::random_field({1, 8, 8}, rng, 0, 1, Space::image));
  PartialGeometry geo;
  const MetricsReport r = cross_view_consistency(imgs, geo);
  REQUIRE(r.empty_pairs.size() == 1);
  CHECK(r.empty_pairs[0] == std::pair<int, int>{0, 1});
  CHECK(r.pairs.size() == 5);
  double mean = 0.0;
  for (const auto& p : r.pairs) {
    CHECK(p.psnr == doctest::Approx(psnr(imgs[p.src], imgs[p.dst])));
    mean += p.psnr;
  }
  CHECK(r.mean_psnr == doctest::Approx(mean / 5));

  std::ostringstream os;
  write_metrics_csv(os, r);
  const std::string csv = os.str();
  CHECK(csv.rfind("kind,src,dst,valid_pixels,psnr,ssim\n", 0) == 0);
  CHECK(csv.find("empty,0,1,0,,\n") != std::string::npos);
  CHECK(csv.find("\nmean,,,5,") != std::string::npos);
}

TEST_CASE("cross-view consistency: a consistent sphere texture scores far above mixed variants") {
  SceneParams p;
  p.per_track = 8;
  p.width = p.height = 40;
  p.variants = 2;
  const SceneSetup sc = make_sphere_scene(2, p);
  const MetricsReport same = cross_view_consistency(sc.renders[0], *sc.geometry);
  std::vector<LatentField> mixed = sc.renders[0];
  for (std::size_t v = 0; v < 8; v += 2) mixed[v] = sc.renders[1][v];
  const MetricsReport mix = cross_view_consistency(mixed, *sc.geometry);
  CHECK(same.empty_pairs.empty());
  CHECK(same.mean_psnr > 35.0);
  CHECK(mix.mean_psnr < same.mean_psnr - 10.0);
}

TEST_CASE("pfm: standard layout, little-endian, bottom-up") {
  const fs::path dir = scratch_dir("pfm");
  LatentField img({1, 2, 2}, Space::image);
  img.at(0, 0, 0) = 1.0f;   // top-left
  img.at(0, 1, 0) = 2.0f;   // bottom-left
  img.at(0, 0, 1) = -0.5f;
  img.at(0, 1, 1) = 0.25f;
  write_pfm(dir / "a.pfm", img);
  const std::string bytes = read_text_file(dir / "a.pfm");
  const std::string header = "Pf\n2 2\n-1.0\n";
  REQUIRE(bytes.size() == header.size() + 16);
  CHECK(bytes.substr(0, header.size()) == header);
  // First stored scanline is the bottom row: 2.0f = 00 00 00 40.
  const unsigned char first[4] = {0x00, 0x00, 0x00, 0x40};
  CHECK(std::memcmp(bytes.data() + header.size(), first, 4) == 0);
  const LatentField back = read_pfm(dir / "a.pfm");
  CHECK(max_abs_diff(back, img) == 0.0);

  std::mt19937_64 rng(2);
  const LatentField rgb = testing::random_field({3, 5, 7}, rng, -3, 3, Space::image);
  write_pfm(dir / "rgb.pfm", rgb);
  const LatentField rgb_back = read_pfm(dir / "rgb.pfm");
  for (std::size_t i = 0; i < rgb.size(); ++i) CHECK(rgb_back[i] == static_cast<double>(static_cast<float>(rgb[i])));

  const LatentField four = testing::random_field({4, 3, 3}, rng);
  const auto files = write_field_pfm(dir / "lat.pfm", four);
  REQUIRE(files.size() == 4);
  CHECK(files[2].filename() == "lat_c2.pfm");
  CHECK(read_pfm(files[3]).at(0, 1, 2) == static_cast<double>(static_cast<float>(four.at(3, 1, 2))));
  CHECK_THROWS_AS(read_pfm(dir / "missing.pfm"), RuntimeError);
  write_text_file(dir / "bad.pfm", "P6\n1 1\n255\nxxx");
  CHECK_THROWS_AS(read_pfm(dir / "bad.pfm"), RuntimeError);
  fs::remove_all(dir);
}

TEST_CASE("png: 8-bit levels round trip exactly") {
  const fs::path dir = scratch_dir("png");
  LatentField img({3, 4, 5}, Space::image);
  for (std::size_t i = 0; i < img.size(); ++i) img[i] = static_cast<double>((i * 37) % 256) / 255.0;
  img[0] = -1.0;  // clamps
  write_png(dir / "a.png", img);
  const LatentField back = read_png(dir / "a.png");
  REQUIRE(back.shape() == img.shape());
  CHECK(back[0] == 0.0);
  for (std::size_t i = 1; i < img.size(); ++i) CHECK(back[i] == img[i]);
  LatentField gray({1, 3, 3}, Space::image, 128.0 / 255.0);
  write_png(dir / "g.png", gray);
  CHECK(read_png(dir / "g.png").channels() == 1);
  CHECK_THROWS_AS(write_png(dir / "x.png", LatentField({2, 3, 3})), ContractError);
  write_text_file(dir / "bad.png", "not a png");
  CHECK_THROWS_AS(read_png(dir / "bad.png"), RuntimeError);
  fs::remove_all(dir);
}

TEST_CASE("sha256: standard test vectors") {
  CHECK(sha256_hex("") == "e3b0c44298fc1c149afbf4c8996fb92427ae41e4649b934ca495991b7852b855");
  CHECK(sha256_hex("abc") == "ba7816bf8f01cfea414140de5dae2223b00361a396177a9cb410ff61f20015ad");
}

}  // namespace
}  // namespace mvd
