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

#include <iosfwd>
#include <utility>
#include <vector>

#include "mvd/core.hpp"
#include "mvd/warpfield.hpp"

namespace mvd {

inline constexpr double kPsnrCap = 99.0;

/// PSNR (peak 1) over the pixels where `mask` > 0 (all pixels when null),
/// averaging the squared error over channels too. Zero error gives `cap`.
/// Throws ContractError on shape mismatch or an empty mask.
double psnr(const LatentField& a, const LatentField& b, const Map2D* mask = nullptr, double cap = kPsnrCap);

/// Mean SSIM over masked pixels and channels: 11x11 Gaussian window
/// (sigma 1.5), C1 = 0.01^2, C2 = 0.03^2. Local statistics are taken over
/// masked pixels only (normalized convolution).
double ssim(const LatentField& a, const LatentField& b, const Map2D* mask = nullptr);

struct PairMetric {
  int src = 0;  // view whose image is warped
  int dst = 0;  // view it is compared against
  int valid_pixels = 0;
  double psnr = 0.0;
  double ssim = 0.0;
};

struct MetricsReport {
  std::vector<PairMetric> pairs;
  std::vector<std::pair<int, int>> empty_pairs;  // excluded, no overlap
  double mean_psnr = 0.0;
  double mean_ssim = 0.0;
};

/// Every view's image warped into each of its blend neighbors and compared
/// there on the warp's valid mask.
MetricsReport cross_view_consistency(const std::vector<LatentField>& images, const ViewGeometry& geo,
                                     int workers = 1);

/// Rows: kind,src,dst,valid_pixels,psnr,ssim with kind pair|empty|mean.
void write_metrics_csv(std::ostream& os, const MetricsReport& report);

}  // namespace mvd
