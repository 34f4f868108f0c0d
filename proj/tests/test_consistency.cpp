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

#include <atomic>
#include <cmath>
#include <limits>
#include <mutex>
#include <random>
#include <set>
#include <thread>

#include "mvd/consistency.hpp"
#include "test_util.hpp"

using namespace mvd;
using mvd::testing::constant_field;
using mvd::testing::random_field;

namespace {

const Shape kScalar{1, 1, 1};

LatentField scalar(double v) { return LatentField(kScalar, Space::latent, v); }

BlendTerm scalar_term(double x, double mu, double w) {
  return {scalar(x), scalar(mu), Map2D(1, 1, w)};
}

// Identity warps with a configurable weight per ordered pair and an optional
// close-up source per target.
class TableGeometry final : public ViewGeometry {
 public:
  TableGeometry(int views, int w, int h, std::vector<std::vector<double>> weights,
                std::vector<int> closeup = {})
      : views_(views), w_(w), h_(h), weights_(std::move(weights)), closeup_(std::move(closeup)) {}
  int num_views() const override { return views_; }
  int image_width() const override { return w_; }
  int image_height() const override { return h_; }
  std::vector<int> sources(int i) const override {
    std::vector<int> s;
    for (int k = 0; k < views_; ++k) {
      if (k != i) s.push_back(k);
    }
    return s;
  }
  int closeup_source(int i) const override { return closeup_.empty() ? -1 : closeup_[i]; }
  WarpResult warp(const LatentField& src, int, int) const override {
    WarpResult r{src, Map2D(h_, w_, 1.0)};
    r.image.set_space(Space::image);
    return r;
  }
  LatentField warp_adjoint(const LatentField& g, int, int) const override { return g; }
  Map2D occlusion(int src, int dst) const override { return Map2D(h_, w_, weights_[dst][src]); }

 private:
  int views_, w_, h_;
  std::vector<std::vector<double>> weights_;
  std::vector<int> closeup_;
};

struct Harness {
  Schedule schedule;
  std::unique_ptr<ViewGeometry> geometry;
  IdentityCodec codec;
  BlendPlan plan;
  std::unique_ptr<DenoiserPool> pool;
  SamplerContext ctx;

  Harness(Schedule s, std::unique_ptr<ViewGeometry> g, std::vector<Denoiser*> ds)
      : schedule(std::move(s)), geometry(std::move(g)) {
    plan = build_blend_plan(*geometry, codec);
    pool = std::make_unique<DenoiserPool>(std::move(ds));
    ctx.schedule = &schedule;
    ctx.geometry = geometry.get();
    ctx.codec = &codec;
    ctx.denoisers = pool.get();
    ctx.plan = &plan;
  }
};

std::vector<ViewState> make_states(int n, const Shape& shape, std::uint64_t seed) {
  auto init = initial_latents(n, shape, seed);
  std::vector<ViewState> st;
  for (int v = 0; v < n; ++v) st.push_back({v, std::move(init[v]), false, true});
  return st;
}

SamplingPolicy always_guided() {
  SamplingPolicy p;
  p.cg_start_fraction = 0.0;
  p.original_steps = 0;
  p.reference_attention = false;
  return p;
}

GaussianMixtureModel three_modes(const Shape& shape) {
  std::vector<LatentField> modes;
  for (int k = 0; k < 3; ++k) {
    LatentField m(shape, Space::latent);
    for (int c = 0; c < shape.channels; ++c) {
      for (int y = 0; y < shape.height; ++y) {
        for (int x = 0; x < shape.width; ++x) {
          m.at(c, y, x) = 0.5 * std::cos(2.0 * M_PI * (k + 1) * (x + 2 * y + 7 * c) / 16.0 + k);
        }
      }
    }
    modes.push_back(std::move(m));
  }
  return {modes, {1.0 / 3, 1.0 / 3, 1.0 / 3}};
}

int nearest_mode(const LatentField& x, const GaussianMixtureModel& g, double* dist) {
  int best = -1;
  double bd = std::numeric_limits<double>::infinity();
  for (std::size_t k = 0; k < g.components.size(); ++k) {
    const double d = max_abs_diff(x, g.components[k]);
    if (d < bd) {
      bd = d;
      best = static_cast<int>(k);
    }
  }
  if (dist) *dist = bd;
  return best;
}

}  // namespace

TEST_CASE("blend_predictions examples") {
  SUBCASE("self term alone returns the own prediction") {
    const LatentField x0 = scalar(0.37);
    const LatentField out = blend_predictions(x0, {scalar_term(0.9, 0.1, 1.0)});
    CHECK(out[0] == 0.37);
  }
  SUBCASE("other terms with zero weight leave the own prediction") {
    const LatentField out =
        blend_predictions(scalar(-0.2), {scalar_term(0.5, 0.0, 1.0), scalar_term(4.0, 1.0, 0.0)});
    CHECK(out[0] == -0.2);
  }
  SUBCASE("four equal views scale deviations by two") {
    const std::vector<double> xs = {0.3, -0.1, 0.7, 0.2};
    const std::vector<double> mus = {0.1, 0.0, 0.4, -0.3};
    std::vector<BlendTerm> terms;
    for (int k = 0; k < 4; ++k) terms.push_back(scalar_term(xs[k], mus[k], 1.0));
    double mean_mu = 0.0, mean_dev = 0.0;
    for (int k = 0; k < 4; ++k) {
      mean_mu += mus[k] / 4;
      mean_dev += (xs[k] - mus[k]) / 4;
    }
    CHECK(blend_predictions(scalar(xs[0]), terms)[0] == doctest::Approx(mean_mu + 2.0 * mean_dev).epsilon(1e-14));
  }
  SUBCASE("two unequal weights, frozen value") {
    const LatentField out =
        blend_predictions(scalar(1.0), {scalar_term(1.0, 0.8, 1.2), scalar_term(0.0, 0.2, 0.6)});
    CHECK(out[0] == doctest::Approx(0.6894427191).epsilon(1e-10));
  }
}

TEST_CASE("blend_predictions coverage contract") {
  const Shape shape{2, 1, 2};
  LatentField x0(shape, Space::latent, 0.25);
  BlendTerm self{x0, x0, Map2D(1, 2, 0.0)};
  Map2D coverage(1, 2, 0.0);
  SUBCASE("uncovered texels keep the own prediction") {
    const LatentField out = blend_predictions(x0, {self}, &coverage);
    CHECK(max_abs_diff(out, x0) == 0.0);
  }
  SUBCASE("covered texel without weight is a contract error") {
    coverage.data[1] = 1.0;
    CHECK_THROWS_AS(blend_predictions(x0, {self}, &coverage), ContractError);
  }
  SUBCASE("mismatched shapes are rejected") {
    BlendTerm bad{LatentField({2, 2, 2}), x0, Map2D(1, 2, 1.0)};
    CHECK_THROWS_AS(blend_predictions(x0, {self, bad}), ContractError);
    BlendTerm bad_w{x0, x0, Map2D(2, 2, 1.0)};
    CHECK_THROWS_AS(blend_predictions(x0, {self, bad_w}), ContractError);
    CHECK_THROWS_AS(blend_predictions(x0, {}), ContractError);
  }
}

TEST_CASE("blend scale is at least one and equals sqrt(N) for equal weights") {
  // With zero means and unit deviations the blend returns the scale itself.
  for (int n : {2, 4, 9}) {
    std::vector<BlendTerm> terms;
    for (int k = 0; k < n; ++k) terms.push_back(scalar_term(1.0, 0.0, 0.7));
    CHECK(blend_predictions(scalar(1.0), terms)[0] == doctest::Approx(std::sqrt(n)).epsilon(1e-14));
  }
  std::mt19937_64 rng(11);
  std::uniform_real_distribution<double> u(0.0, 2.0);
  std::bernoulli_distribution zero(0.3);
  for (int trial = 0; trial < 2000; ++trial) {
    const int n = 1 + trial % 7;
    std::vector<BlendTerm> terms;
    std::vector<double> w;
    for (int k = 0; k < n; ++k) {
      w.push_back((k == 0 || !zero(rng)) ? u(rng) + 1e-3 : 0.0);
      terms.push_back(scalar_term(1.0, 0.0, w.back()));
    }
    double sum = 0.0, sq = 0.0;
    int positive = 0;
    for (double x : w) {
      sum += x;
      sq += x * x;
      positive += x > 0.0;
    }
    const double e = blend_predictions(scalar(1.0), terms)[0];
    CHECK(e >= 1.0 - 1e-12);
    CHECK(e == doctest::Approx(sum / std::sqrt(sq)).epsilon(1e-12));
    if (positive > 1) CHECK(e > 1.0 + 1e-9);
  }
}

TEST_CASE("variance calibration of the scaled blend") {
  // Independent unit-variance deviations, equal weights: the blended
  // deviation keeps unit variance.
  const int texels = 100000;
  for (int n : {2, 4, 9}) {
    std::mt19937_64 rng(1000 + n);
    std::normal_distribution<double> normal(0.0, 1.0);
    const Shape shape{1, 1, texels};
    const LatentField zero(shape);
    std::vector<BlendTerm> terms;
    for (int k = 0; k < n; ++k) {
      LatentField dev(shape);
      for (auto& v : dev.storage()) v = normal(rng);
      terms.push_back({std::move(dev), zero, Map2D(1, texels, 1.0)});
    }
    const LatentField out = blend_predictions(terms[0].transported, terms);
    double mean = 0.0, m2 = 0.0;
    for (double v : out.storage()) mean += v;
    mean /= texels;
    for (double v : out.storage()) m2 += (v - mean) * (v - mean);
    const double var = m2 / (texels - 1);
    INFO("N=" << n << " variance=" << var);
    CHECK(std::abs(var - 1.0) <= 0.05);
  }
}

TEST_CASE("cg_noise") {
  const Schedule s = Schedule::from_alpha_bar({1.0, 0.64});
  SUBCASE("frozen scalar") {
    CHECK(cg_noise(scalar(1.0), scalar(0.69069), 1, s)[0] == doctest::Approx(0.745746666667).epsilon(1e-11));
  }
  SUBCASE("own prediction gives back the own noise") {
    std::mt19937_64 rng(3);
    const LatentField x = random_field({2, 3, 3}, rng);
    const LatentField eps = random_field({2, 3, 3}, rng);
    CHECK(max_abs_diff(cg_noise(x, predict_original(x, eps, 1, s), 1, s), eps) <= 1e-12);
  }
  SUBCASE("mean prediction gives zero noise") {
    const LatentField x = scalar(0.9);
    CHECK(std::abs(cg_noise(x, scalar(0.9 / 0.8), 1, s)[0]) <= 1e-15);
  }
  SUBCASE("alpha_bar = 1 is rejected") {
    CHECK_THROWS_AS(cg_noise(scalar(1.0), scalar(1.0), 0, s), NumericalError);
  }
}

TEST_CASE("upper-body replacement") {
  std::mt19937_64 rng(5);
  const Shape shape{3, 4, 6};
  const LatentField blended = random_field(shape, rng);
  const LatentField closeup = random_field(shape, rng);
  SUBCASE("empty mask") {
    CHECK(max_abs_diff(apply_upper_body_replacement(blended, closeup, Map2D(4, 6, 0.0)), blended) == 0.0);
  }
  SUBCASE("full mask") {
    CHECK(max_abs_diff(apply_upper_body_replacement(blended, closeup, Map2D(4, 6, 0.4)), closeup) == 0.0);
  }
  SUBCASE("partial mask is a per-texel select") {
    Map2D mask(4, 6, 0.0);
    for (int y = 0; y < 4; ++y) {
      for (int x = 0; x < 6; ++x) mask(y, x) = (y < 2 || x == 5) ? 0.8 : 0.0;
    }
    const LatentField out = apply_upper_body_replacement(blended, closeup, mask);
    for (int c = 0; c < 3; ++c) {
      for (int y = 0; y < 4; ++y) {
        for (int x = 0; x < 6; ++x) {
          const double want = mask(y, x) > 0.0 ? closeup.at(c, y, x) : blended.at(c, y, x);
          CHECK(out.at(c, y, x) == want);
        }
      }
    }
  }
  SUBCASE("mismatch") {
    CHECK_THROWS_AS(apply_upper_body_replacement(blended, closeup, Map2D(2, 6)), ContractError);
  }
}

TEST_CASE("guided-step schedule") {
  SamplingPolicy p;
  CHECK_FALSE(is_guided_step(p, 150, 150));
  CHECK_FALSE(is_guided_step(p, 136, 150));  // 9.3% elapsed
  CHECK(is_guided_step(p, 134, 150));
  CHECK_FALSE(is_guided_step(p, 133, 150));
  CHECK(is_guided_step(p, 2, 150));
  CHECK_FALSE(is_guided_step(p, 1, 150));
  p.cg_start_fraction = 1.0;
  for (int t = 150; t >= 1; --t) CHECK_FALSE(is_guided_step(p, t, 150));
  p.cg_start_fraction = 0.0;
  p.guided_steps = 2;
  CHECK(is_guided_step(p, 150, 150));  // 150 % 3 == 0
  CHECK(is_guided_step(p, 1, 150));
  CHECK_FALSE(is_guided_step(p, 2, 150));
  p.guidance = false;
  CHECK_FALSE(is_guided_step(p, 150, 150));
}

TEST_CASE("policy validation") {
  SamplingPolicy p;
  CHECK_NOTHROW(p.validate());
  p.cg_start_fraction = 1.5;
  CHECK_THROWS_AS(p.validate(), ConfigError);
  p = {};
  p.guided_steps = 0;
  CHECK_THROWS_AS(p.validate(), ConfigError);
  p = {};
  p.original_steps = -1;
  CHECK_THROWS_AS(p.validate(), ConfigError);
  p = {};
  p.reference_view = -2;
  CHECK_THROWS_AS(p.validate(), ConfigError);
}

TEST_CASE("blend plan on identity geometry") {
  IdentityGeometry geo(4, 5, 3);
  IdentityCodec codec;
  const BlendPlan plan = build_blend_plan(geo, codec);
  REQUIRE(plan.targets.size() == 4);
  for (int i = 0; i < 4; ++i) {
    REQUIRE(plan.targets[i].size() == 4);
    CHECK(plan.targets[i][0].view == i);
    for (const auto& src : plan.targets[i]) {
      for (double w : src.weight.data) CHECK(w == 1.0);
    }
    CHECK(plan.closeup[i] == -1);
    for (double c : plan.coverage[i].data) CHECK(c == 1.0);
  }
  PoolingCodec pool(2);
  CHECK_THROWS_AS(build_blend_plan(geo, pool), ConfigError);
}

TEST_CASE("guided step with isolated views equals a plain step") {
  std::mt19937_64 rng(17);
  const Shape shape{2, 3, 4};
  const Schedule s = Schedule::build(20);
  OracleDenoiser d({random_field(shape, rng), random_field(shape, rng), random_field(shape, rng)}, s);
  std::vector<std::vector<double>> w = {{1, 0, 0}, {0, 1, 0}, {0, 0, 1}};
  Harness h(s, std::make_unique<TableGeometry>(3, 4, 3, w), {&d});
  auto states = make_states(3, shape, 9);
  const auto before = states;
  bool saw_guided = false;
  h.ctx.observer = [&](const StepRecord& r) { saw_guided = r.guided; };
  multiview_step(states, h.ctx, always_guided(), 12);
  CHECK(saw_guided);
  for (int v = 0; v < 3; ++v) {
    DenoiserRequest req;
    req.view_id = v;
    req.timestep = 12;
    req.latent = before[v].latent;
    const LatentField plain = ddim_step(before[v].latent, d.denoise(req).eps, 12, s);
    CHECK(max_abs_diff(states[v].latent, plain) <= 1e-6);
  }
}

TEST_CASE("single view under the default policy is a plain rollout") {
  std::mt19937_64 rng(23);
  const Shape shape{3, 4, 4};
  const Schedule s = Schedule::build(40);
  const GaussianMixtureModel g = three_modes(shape);
  GmmDenoiser d(g, s);
  const auto out = run_2d_degenerate(1, d, s, SamplingPolicy{}, shape, 4);
  LatentField x = initial_latents(1, shape, 4)[0];
  for (int t = 40; t >= 1; --t) {
    DenoiserRequest req;
    req.timestep = t;
    req.latent = x;
    x = ddim_step(x, d.denoise(req).eps, t, s);
  }
  CHECK(max_abs_diff(out[0], x) <= 1e-12);
}

TEST_CASE("guidance off lets views evolve independently") {
  const Shape shape{1, 2, 2};
  const Schedule s = Schedule::build(30);
  GmmDenoiser d(three_modes(shape), s);
  SamplingPolicy p;
  p.cg_start_fraction = 1.0;
  p.reference_attention = false;
  const auto joint = run_2d_degenerate(3, d, s, p, shape, 8);
  const auto init = initial_latents(3, shape, 8);
  for (int v = 0; v < 3; ++v) {
    LatentField x = init[v];
    for (int t = 30; t >= 1; --t) {
      DenoiserRequest req;
      req.view_id = v;
      req.timestep = t;
      req.latent = x;
      x = ddim_step(x, d.denoise(req).eps, t, s);
    }
    CHECK(max_abs_diff(joint[v], x) == 0.0);
  }
}

TEST_CASE("close-up replacement inside a guided step") {
  std::mt19937_64 rng(31);
  const Shape shape{1, 2, 3};
  const Schedule s = Schedule::build(10);
  OracleDenoiser d({random_field(shape, rng), random_field(shape, rng)}, s);
  std::vector<std::vector<double>> w = {{1, 1}, {1, 1}};
  Harness h(s, std::make_unique<TableGeometry>(2, 3, 2, w, std::vector<int>{1, -1}), {&d});
  auto states = make_states(2, shape, 2);
  StepRecord rec;
  h.ctx.observer = [&](const StepRecord& r) { rec = r; };
  SamplingPolicy p = always_guided();
  SUBCASE("replacement on") {
    multiview_step(states, h.ctx, p, 5);
    CHECK(max_abs_diff(rec.blended[0], rec.predicted[1]) <= 1e-12);
    CHECK(max_abs_diff(rec.blended[1], rec.predicted[1]) > 1e-3);
  }
  SUBCASE("replacement off") {
    p.closeup_replacement = false;
    multiview_step(states, h.ctx, p, 5);
    CHECK(max_abs_diff(rec.blended[0], rec.predicted[1]) > 1e-3);
  }
  SUBCASE("noise derived from the unreplaced blend") {
    const auto before = states;
    p.replace_before_noise = false;
    multiview_step(states, h.ctx, p, 5);
    // eps' then belongs to the plain blend, while the latent moves toward the
    // replaced prediction.
    const double sa = std::sqrt(s.alpha_bar(5));
    const double sn = std::sqrt(1 - s.alpha_bar(5));
    for (std::size_t e = 0; e < rec.noise[0].size(); ++e) {
      const double plain_blend = (before[0].latent[e] - sn * rec.noise[0][e]) / sa;
      CHECK(std::abs(plain_blend - rec.blended[0][e]) > 1e-6);
    }
    const double sap = std::sqrt(s.alpha_bar(4));
    const double snp = std::sqrt(1 - s.alpha_bar(4));
    for (std::size_t e = 0; e < states[0].latent.size(); ++e) {
      CHECK(states[0].latent[e] == doctest::Approx(sap * rec.blended[0][e] + snp * rec.noise[0][e]));
    }
  }
}

namespace {

// Records call order and fails on demand.
class ProbeDenoiser final : public Denoiser {
 public:
  explicit ProbeDenoiser(Schedule s, Concurrency c = Concurrency::concurrent_safe) : s_(std::move(s)), c_(c) {}
  DenoiserResponse denoise(const DenoiserRequest& req) override {
    const int now = ++in_flight_;
    int prev = max_in_flight_.load();
    while (now > prev && !max_in_flight_.compare_exchange_weak(prev, now)) {
    }
    if (c_ == Concurrency::serial_only) std::this_thread::sleep_for(std::chrono::microseconds(200));
    {
      std::lock_guard<std::mutex> lock(mu_);
      calls.push_back({req.view_id, req.reference_features.has_value()});
    }
    --in_flight_;
    if (req.view_id == fail_view && req.timestep == fail_t) throw RuntimeError("probe", "injected failure");
    DenoiserResponse r;
    r.eps = LatentField(req.latent.shape(), Space::latent, 0.1 * (req.view_id + 1));
    if (req.view_id == nan_view) r.eps[0] = std::nan("");
    if (req.view_id == bad_shape_view) r.eps = LatentField({1, 1, 1});
    r.features = AttentionFeatures{Eigen::MatrixXd::Ones(1, 1), Eigen::MatrixXd::Ones(1, 1)};
    return r;
  }
  Concurrency concurrency() const override { return c_; }

  std::vector<std::pair<int, bool>> calls;
  int fail_view = -1, fail_t = -1, nan_view = -1, bad_shape_view = -1;
  std::atomic<int> max_in_flight_{0};

 private:
  Schedule s_;
  Concurrency c_;
  std::atomic<int> in_flight_{0};
  std::mutex mu_;
};

}  // namespace

TEST_CASE("denoiser failure aborts the step atomically") {
  const Shape shape{1, 2, 2};
  const Schedule s = Schedule::build(10);
  ProbeDenoiser d(s);
  Harness h(s, std::make_unique<IdentityGeometry>(4, 2, 2), {&d});
  h.ctx.workers = 4;
  for (bool guided : {false, true}) {
    SamplingPolicy p = guided ? always_guided() : SamplingPolicy{};
    p.guidance = guided;
    auto states = make_states(4, shape, 1);
    const auto before = states;
    auto unchanged = [&] {
      for (int v = 0; v < 4; ++v) CHECK(max_abs_diff(states[v].latent, before[v].latent) == 0.0);
    };
    d.fail_view = 2;
    d.fail_t = 6;
    CHECK_THROWS_AS(multiview_step(states, h.ctx, p, 6), RuntimeError);
    unchanged();
    d.fail_view = -1;
    d.nan_view = 3;
    CHECK_THROWS_AS(multiview_step(states, h.ctx, p, 6), NumericalError);
    unchanged();
    d.nan_view = -1;
    d.bad_shape_view = 0;
    CHECK_THROWS_AS(multiview_step(states, h.ctx, p, 6), ContractError);
    unchanged();
    d.bad_shape_view = -1;
    CHECK_NOTHROW(multiview_step(states, h.ctx, p, 6));
  }
}

TEST_CASE("reference view is denoised first and shared") {
  const Shape shape{1, 1, 2};
  const Schedule s = Schedule::build(10);
  ProbeDenoiser d(s);
  Harness h(s, std::make_unique<IdentityGeometry>(4, 2, 1), {&d});
  h.ctx.workers = 3;
  auto states = make_states(4, shape, 1);
  SamplingPolicy p;
  p.reference_view = 2;
  multiview_step(states, h.ctx, p, 4);
  REQUIRE(d.calls.size() == 4);
  CHECK(d.calls[0] == std::make_pair(2, false));
  std::set<int> rest;
  for (std::size_t k = 1; k < 4; ++k) {
    CHECK(d.calls[k].second);
    rest.insert(d.calls[k].first);
  }
  CHECK(rest == std::set<int>{0, 1, 3});

  d.calls.clear();
  p.reference_attention = false;
  multiview_step(states, h.ctx, p, 3);
  for (const auto& c : d.calls) CHECK_FALSE(c.second);
}

TEST_CASE("denoiser pool lends serial members one caller at a time") {
  const Schedule s = Schedule::build(10);
  ProbeDenoiser a(s, Concurrency::serial_only);
  ProbeDenoiser b(s, Concurrency::serial_only);
  DenoiserPool pool({&a, &b});
  CHECK(pool.max_parallel(8) == 2);
  CHECK(pool.max_parallel(0) == 1);
  std::vector<std::thread> threads;
  for (int k = 0; k < 8; ++k) {
    threads.emplace_back([&, k] {
      for (int rep = 0; rep < 20; ++rep) {
        DenoiserRequest req;
        req.view_id = k % 4;
        req.latent = LatentField({1, 1, 1});
        pool.denoise(req);
      }
    });
  }
  for (auto& t : threads) t.join();
  CHECK(a.max_in_flight_.load() == 1);
  CHECK(b.max_in_flight_.load() == 1);
  CHECK(a.calls.size() + b.calls.size() == 160);

  ProbeDenoiser shared(s);
  DenoiserPool sp(shared);
  CHECK(sp.max_parallel(8) == 8);
  CHECK_THROWS_AS(DenoiserPool(std::vector<Denoiser*>{}), ConfigError);
}

TEST_CASE("determinism and worker independence") {
  const Shape shape{2, 4, 4};
  const Schedule s = Schedule::build(30);
  GmmDenoiser d(three_modes(shape), s);
  std::vector<std::vector<double>> w = {{1, 0.5, 0.8}, {0.3, 1, 0.0}, {1.1, 0.9, 1}};
  std::vector<std::vector<LatentField>> finals;
  for (int workers : {1, 1, 4}) {
    Harness h(s, std::make_unique<TableGeometry>(3, 4, 4, w), {&d});
    h.ctx.workers = workers;
    auto states = make_states(3, shape, 77);
    run_multiview(states, h.ctx, SamplingPolicy{});
    std::vector<LatentField> out;
    for (auto& st : states) out.push_back(st.latent);
    finals.push_back(out);
  }
  for (int run = 1; run < 3; ++run) {
    for (int v = 0; v < 3; ++v) CHECK(finals[run][v].storage() == finals[0][v].storage());
  }
}

TEST_CASE("lockstep and pre-step hook ordering") {
  const Shape shape{1, 1, 1};
  const Schedule s = Schedule::build(12);
  GmmDenoiser d(three_modes(shape), s);
  Harness h(s, std::make_unique<IdentityGeometry>(3, 1, 1), {&d});
  std::vector<int> hook_ts, step_ts;
  h.ctx.observer = [&](const StepRecord& r) { step_ts.push_back(r.t); };
  auto states = make_states(3, shape, 5);
  run_multiview(states, h.ctx, SamplingPolicy{}, [&](std::vector<ViewState>& st, int t) {
    CHECK(st.size() == 3);
    hook_ts.push_back(t);
  });
  REQUIRE(hook_ts.size() == 12);
  for (int k = 0; k < 12; ++k) {
    CHECK(hook_ts[k] == 12 - k);
    CHECK(step_ts[k] == 12 - k);
  }
  CHECK_THROWS_AS(multiview_step(states, h.ctx, SamplingPolicy{}, 0), ContractError);
  CHECK_THROWS_AS(multiview_step(states, h.ctx, SamplingPolicy{}, 13), ContractError);
}

TEST_CASE("degenerate scenario recovers one mode") {
  const Shape shape{3, 8, 8};
  const Schedule s = Schedule::build(150);
  const GaussianMixtureModel g = three_modes(shape);
  GmmDenoiser d(g, s);
  SamplingPolicy vanilla;
  vanilla.guidance = false;
  vanilla.reference_attention = false;
  int split_seeds = 0;
  for (std::uint64_t seed = 0; seed < 10; ++seed) {
    const auto out = run_2d_degenerate(4, d, s, SamplingPolicy{}, shape, seed);
    double dist = 0.0;
    const int mode = nearest_mode(out[0], g, &dist);
    CHECK(dist <= 1e-2);
    for (const auto& o : out) {
      CHECK(max_abs_diff(o, out[0]) <= 1e-3);
      CHECK(nearest_mode(o, g, nullptr) == mode);
    }
    const auto free = run_2d_degenerate(4, d, s, vanilla, shape, seed);
    std::set<int> modes;
    for (const auto& o : free) {
      double dv = 0.0;
      modes.insert(nearest_mode(o, g, &dv));
      CHECK(dv <= 1e-2);
    }
    split_seeds += modes.size() >= 2;
  }
  CHECK(split_seeds >= 1);
  CHECK_THROWS_AS(run_2d_degenerate(0, d, s, SamplingPolicy{}, shape, 0), ConfigError);
}

TEST_CASE("initial latents are seeded standard normals") {
  const auto a = initial_latents(3, {2, 8, 8}, 42);
  const auto b = initial_latents(3, {2, 8, 8}, 42);
  const auto c = initial_latents(3, {2, 8, 8}, 43);
  double mean = 0.0, sq = 0.0;
  for (int v = 0; v < 3; ++v) {
    CHECK(a[v].storage() == b[v].storage());
    CHECK(a[v].storage() != c[v].storage());
    for (double x : a[v].storage()) {
      mean += x;
      sq += x * x;
    }
  }
  mean /= 384;
  CHECK(std::abs(mean) < 0.2);
  CHECK(std::abs(sq / 384 - 1.0) < 0.2);
}
