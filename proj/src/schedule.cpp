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

#include "mvd/schedule.hpp"

#include <cmath>
#include <numbers>
#include <string>

namespace mvd {
namespace {

constexpr const char* kModule = "schedule";

void validate_table(const std::vector<double>& ab) {
  if (ab.size() < 2) throw ConfigError(kModule, "num_steps must be >= 1");
  if (ab[0] != 1.0) throw ConfigError(kModule, "alpha_bar[0] must equal 1");
  for (std::size_t t = 1; t < ab.size(); ++t) {
    if (!(ab[t] > 0.0 && ab[t] <= 1.0) || !std::isfinite(ab[t])) {
      throw ConfigError(kModule, "alpha_bar[" + std::to_string(t) + "] outside (0,1]");
    }
    if (!(ab[t] < ab[t - 1])) {
      throw ConfigError(kModule,
                        "alpha_bar must be strictly decreasing (t=" + std::to_string(t) + ")");
    }
  }
}

void check_t(int t, const Schedule& s, int lo) {
  if (t < lo || t > s.num_steps()) {
    throw ContractError(kModule, "timestep " + std::to_string(t) + " outside [" +
                                     std::to_string(lo) + "," + std::to_string(s.num_steps()) +
                                     "]");
  }
}

}  // namespace

Schedule Schedule::build(int num_steps, const BetaSpec& spec) {
  if (num_steps < 1) throw ConfigError(kModule, "num_steps must be >= 1, got " + std::to_string(num_steps));

  std::vector<double> betas(static_cast<std::size_t>(num_steps));
  if (spec.kind == BetaKind::linear) {
    if (!(spec.beta_start > 0.0)) throw ConfigError(kModule, "beta_start must be > 0");
    if (!(spec.beta_end < 1.0)) throw ConfigError(kModule, "beta_end must be < 1");
    if (!(spec.beta_start <= spec.beta_end)) {
      throw ConfigError(kModule, "beta_start must be <= beta_end");
    }
    for (int i = 0; i < num_steps; ++i) {
      const double f = num_steps == 1 ? 0.0 : static_cast<double>(i) / (num_steps - 1);
      betas[static_cast<std::size_t>(i)] = spec.beta_start + (spec.beta_end - spec.beta_start) * f;
    }
  } else {
    // Squared-cosine family with the usual 0.008 offset, betas clipped at 0.999.
    constexpr double offset = 0.008;
    auto f = [&](double t) {
      const double c = std::cos((t / num_steps + offset) / (1.0 + offset) * std::numbers::pi / 2.0);
      return c * c;
    };
    for (int i = 0; i < num_steps; ++i) {
      const double b = 1.0 - f(i + 1.0) / f(static_cast<double>(i));
      betas[static_cast<std::size_t>(i)] = std::min(b, 0.999);
    }
  }

  std::vector<double> ab(static_cast<std::size_t>(num_steps) + 1);
  ab[0] = 1.0;
  for (int t = 1; t <= num_steps; ++t) ab[t] = ab[t - 1] * (1.0 - betas[t - 1]);
  validate_table(ab);
  return Schedule(std::move(ab), spec);
}

Schedule Schedule::from_alpha_bar(std::vector<double> alpha_bar) {
  validate_table(alpha_bar);
  return Schedule(std::move(alpha_bar), BetaSpec{});
}

double Schedule::alpha_bar(int t) const {
  check_t(t, *this, 0);
  return alpha_bar_[static_cast<std::size_t>(t)];
}

LatentField predict_original(const LatentField& x_t, const LatentField& eps, int t,
                             const Schedule& s) {
  require_same_shape(x_t, eps, kModule, "predict_original");
  check_t(t, s, 0);
  const double ab = s.alpha_bar(t);
  const double sa = std::sqrt(ab);
  const double sn = std::sqrt(1.0 - ab);
  LatentField out(x_t.shape(), x_t.space());
  for (std::size_t i = 0; i < out.size(); ++i) out[i] = (x_t[i] - sn * eps[i]) / sa;
  return out;
}

LatentField ddim_step(const LatentField& x_t, const LatentField& eps, int t, const Schedule& s) {
  require_same_shape(x_t, eps, kModule, "ddim_step");
  check_t(t, s, 1);
  const LatentField x0 = predict_original(x_t, eps, t, s);
  const double prev = s.alpha_bar(t - 1);
  const double sa = std::sqrt(prev);
  const double sn = std::sqrt(1.0 - prev);
  LatentField out(x_t.shape(), x_t.space());
  for (std::size_t i = 0; i < out.size(); ++i) out[i] = sa * x0[i] + sn * eps[i];
  return out;
}

LatentField noise_from_original(const LatentField& x_t, const LatentField& x0, int t,
                                const Schedule& s) {
  require_same_shape(x_t, x0, kModule, "noise_from_original");
  check_t(t, s, 0);
  const double ab = s.alpha_bar(t);
  if (ab >= 1.0) {
    throw NumericalError(kModule, "noise_from_original undefined at alpha_bar=1 (t=" +
                                      std::to_string(t) + ")");
  }
  const double sa = std::sqrt(ab);
  const double sn = std::sqrt(1.0 - ab);
  LatentField out(x_t.shape(), x_t.space());
  for (std::size_t i = 0; i < out.size(); ++i) out[i] = (x_t[i] - sa * x0[i]) / sn;
  return out;
}

}  // namespace mvd
