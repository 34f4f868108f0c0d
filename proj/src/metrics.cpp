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

#include "mvd/metrics.hpp"

#include <array>
#include <cmath>
#include <iomanip>
#include <ostream>

namespace mvd {
namespace {

constexpr const char* kModule = "metrics";
constexpr int kRadius = 5;
constexpr double kSigma = 1.5;
constexpr double kC1 = 0.01 * 0.01;
constexpr double kC2 = 0.03 * 0.03;

void check_pair(const LatentField& a, const LatentField& b, const Map2D* mask) {
  require_same_shape(a, b, kModule, "metric inputs");
  if (mask && (mask->height != a.height() || mask->width != a.width())) {
    throw ContractError(kModule, "mask size does not match the images");
  }
}

bool inside(const Map2D* mask, int y, int x) { return !mask || (*mask)(y, x) > 0.0; }

std::array<double, 2 * kRadius + 1> gaussian_taps() {
  std::array<double, 2 * kRadius + 1> g{};
  double sum = 0.0;
  for (int i = -kRadius; i <= kRadius; ++i) {
    g[i + kRadius] = std::exp(-(i * i) / (2.0 * kSigma * kSigma));
    sum += g[i + kRadius];
  }
  for (double& v : g) v /= sum;
  return g;
}

// Separable Gaussian filter with zero padding.
Map2D blur(const Map2D& m) {
  static const auto g = gaussian_taps();
  Map2D tmp(m.height, m.width);
  Map2D out(m.height, m.width);
  for (int y = 0; y < m.height; ++y) {
    for (int x = 0; x < m.width; ++x) {
      double s = 0.0;
      for (int d = -kRadius; d <= kRadius; ++d) {
        const int xx = x + d;
        if (xx >= 0 && xx < m.width) s += g[d + kRadius] * m(y, xx);
      }
      tmp(y, x) = s;
    }
  }
  for (int y = 0; y < m.height; ++y) {
    for (int x = 0; x < m.width; ++x) {
      double s = 0.0;
      for (int d = -kRadius; d <= kRadius; ++d) {
        const int yy = y + d;
        if (yy >= 0 && yy < m.height) s += g[d + kRadius] * tmp(yy, x);
      }
      out(y, x) = s;
    }
  }
  return out;
}

}  // namespace

double psnr(const LatentField& a, const LatentField& b, const Map2D* mask, double cap) {
  check_pair(a, b, mask);
  double sum = 0.0;
  long count = 0;
  for (int y = 0; y < a.height(); ++y) {
    for (int x = 0; x < a.width(); ++x) {
      if (!inside(mask, y, x)) continue;
      for (int c = 0; c < a.channels(); ++c) {
        const double d = a.at(c, y, x) - b.at(c, y, x);
        sum += d * d;
      }
      count += a.channels();
    }
  }
  if (count == 0) throw ContractError(kModule, "PSNR over an empty mask");
  const double mse = sum / static_cast<double>(count);
  if (mse == 0.0) return cap;
  return std::min(cap, -10.0 * std::log10(mse));
}

double ssim(const LatentField& a, const LatentField& b, const Map2D* mask) {
  check_pair(a, b, mask);
  const int h = a.height();
  const int w = a.width();
  Map2D m(h, w);
  int count = 0;
  for (int y = 0; y < h; ++y)
    for (int x = 0; x < w; ++x)
      if (inside(mask, y, x)) {
        m(y, x) = 1.0;
        ++count;
      }
  if (count == 0) throw ContractError(kModule, "SSIM over an empty mask");
  const Map2D norm = blur(m);

  double total = 0.0;
  Map2D pa(h, w), pb(h, w), paa(h, w), pbb(h, w), pab(h, w);
  for (int c = 0; c < a.channels(); ++c) {
    for (int y = 0; y < h; ++y) {
      for (int x = 0; x < w; ++x) {
        const double u = a.at(c, y, x) * m(y, x);
        const double v = b.at(c, y, x) * m(y, x);
        pa(y, x) = u;
        pb(y, x) = v;
        paa(y, x) = u * a.at(c, y, x);
        pbb(y, x) = v * b.at(c, y, x);
        pab(y, x) = u * b.at(c, y, x);
      }
    }
    const Map2D ea = blur(pa), eb = blur(pb), eaa = blur(paa), ebb = blur(pbb), eab = blur(pab);
    for (int y = 0; y < h; ++y) {
      for (int x = 0; x < w; ++x) {
        if (m(y, x) == 0.0) continue;
        const double n = norm(y, x);
        const double mu_a = ea(y, x) / n;
        const double mu_b = eb(y, x) / n;
        const double var_a = std::max(0.0, eaa(y, x) / n - mu_a * mu_a);
        const double var_b = std::max(0.0, ebb(y, x) / n - mu_b * mu_b);
        const double cov = eab(y, x) / n - mu_a * mu_b;
        total += ((2 * mu_a * mu_b + kC1) * (2 * cov + kC2)) /
                 ((mu_a * mu_a + mu_b * mu_b + kC1) * (var_a + var_b + kC2));
      }
    }
  }
  return total / (static_cast<double>(count) * a.channels());
}

MetricsReport cross_view_consistency(const std::vector<LatentField>& images, const ViewGeometry& geo,
                                     int workers) {
  const int n = geo.num_views();
  if (static_cast<int>(images.size()) != n) {
    throw ContractError(kModule, "expected " + std::to_string(n) + " images, got " + std::to_string(images.size()));
  }
  std::vector<std::pair<int, int>> jobs;
  for (int v = 0; v < n; ++v)
    for (int nb : geo.sources(v)) jobs.emplace_back(v, nb);

  struct Slot {
    bool empty = true;
    PairMetric metric;
  };
  std::vector<Slot> slots(jobs.size());
  parallel_for(static_cast<int>(jobs.size()), workers, [&](int k) {
    const auto [src, dst] = jobs[static_cast<std::size_t>(k)];
    const WarpResult warped = geo.warp(images[static_cast<std::size_t>(src)], src, dst);
    int valid = 0;
    for (double v : warped.mask.data) valid += v > 0.0 ? 1 : 0;
    Slot& s = slots[static_cast<std::size_t>(k)];
    s.metric.src = src;
    s.metric.dst = dst;
    s.metric.valid_pixels = valid;
    if (valid == 0) return;
    s.empty = false;
    const LatentField& ref = images[static_cast<std::size_t>(dst)];
    s.metric.psnr = psnr(warped.image, ref, &warped.mask);
    s.metric.ssim = ssim(warped.image, ref, &warped.mask);
  });

  MetricsReport r;
  for (const Slot& s : slots) {
    if (s.empty) {
      r.empty_pairs.emplace_back(s.metric.src, s.metric.dst);
      continue;
    }
    r.pairs.push_back(s.metric);
    r.mean_psnr += s.metric.psnr;
    r.mean_ssim += s.metric.ssim;
  }
  if (!r.pairs.empty()) {
    r.mean_psnr /= static_cast<double>(r.pairs.size());
    r.mean_ssim /= static_cast<double>(r.pairs.size());
  }
  return r;
}

void write_metrics_csv(std::ostream& os, const MetricsReport& report) {
  os << "kind,src,dst,valid_pixels,psnr,ssim\n" << std::setprecision(10);
  for (const auto& p : report.pairs) {
    os << "pair," << p.src << ',' << p.dst << ',' << p.valid_pixels << ',' << p.psnr << ',' << p.ssim << '\n';
  }
  for (const auto& [s, d] : report.empty_pairs) os << "empty," << s << ',' << d << ",0,,\n";
  os << "mean,,," << report.pairs.size() << ',' << report.mean_psnr << ',' << report.mean_ssim << '\n';
}

}  // namespace mvd
