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

#include "mvd/consistency.hpp"

#include <algorithm>
#include <cmath>
#include <random>

namespace mvd {
namespace {

constexpr const char* kModule = "consistency";

LatentField scaled(const LatentField& x, double k) {
  LatentField out = x;
  for (auto& v : out.storage()) v *= k;
  return out;
}

}  // namespace

void SamplingPolicy::validate() const {
  if (!(cg_start_fraction >= 0.0 && cg_start_fraction <= 1.0)) {
    throw ConfigError(kModule, "cg_start_fraction must lie in [0,1]");
  }
  if (original_steps < 0) throw ConfigError(kModule, "original_steps must be >= 0");
  if (guided_steps < 1) throw ConfigError(kModule, "guided_steps must be >= 1");
  if (reference_view < 0) throw ConfigError(kModule, "reference_view must be >= 0");
}

bool is_guided_step(const SamplingPolicy& policy, int t, int num_steps) {
  if (!policy.guidance) return false;
  const double elapsed = static_cast<double>(num_steps - t) / num_steps;
  if (elapsed < policy.cg_start_fraction) return false;
  const int period = policy.original_steps + policy.guided_steps;
  return t % period < policy.guided_steps;
}

LatentField blend_predictions(const LatentField& own_x0, const std::vector<BlendTerm>& terms,
                              const Map2D* coverage) {
  if (terms.empty()) throw ContractError(kModule, "blend needs at least the self term");
  const Shape shape = own_x0.shape();
  const std::size_t plane = shape.plane();
  for (const auto& term : terms) {
    require_same_shape(own_x0, term.transported, kModule, "blend_predictions");
    require_same_shape(own_x0, term.mean, kModule, "blend_predictions");
    if (term.weight.size() != plane) throw ContractError(kModule, "blend weight map resolution mismatch");
  }
  if (coverage && coverage->size() != plane) throw ContractError(kModule, "coverage map resolution mismatch");

  LatentField out = own_x0;
  for (std::size_t p = 0; p < plane; ++p) {
    double sum = 0.0;
    double sq = 0.0;
    int positive = 0;
    for (const auto& term : terms) {
      const double m = term.weight.data[p];
      if (m > 0.0) {
        sum += m;
        sq += m * m;
        ++positive;
      }
    }
    if (positive == 0) {
      if (coverage && coverage->data[p] > 0.0) {
        throw ContractError(kModule, "covered texel " + std::to_string(p) + " has no positive blend weight");
      }
      continue;
    }
    if (positive == 1 && terms.front().weight.data[p] > 0.0) continue;
    const double e = sum / std::sqrt(sq);
    for (int c = 0; c < shape.channels; ++c) {
      const std::size_t i = c * plane + p;
      double v = 0.0;
      for (const auto& term : terms) {
        const double m = term.weight.data[p];
        if (!(m > 0.0)) continue;
        v += (m / sum) * (term.mean[i] + e * (term.transported[i] - term.mean[i]));
      }
      out[i] = v;
    }
  }
  return out;
}

LatentField cg_noise(const LatentField& x_t, const LatentField& blended, int t, const Schedule& s) {
  return noise_from_original(x_t, blended, t, s);
}

LatentField apply_upper_body_replacement(const LatentField& blended, const LatentField& closeup,
                                         const Map2D& closeup_weight) {
  require_same_shape(blended, closeup, kModule, "apply_upper_body_replacement");
  const std::size_t plane = blended.shape().plane();
  if (closeup_weight.size() != plane) throw ContractError(kModule, "close-up weight resolution mismatch");
  LatentField out = blended;
  for (std::size_t p = 0; p < plane; ++p) {
    if (!(closeup_weight.data[p] > 0.0)) continue;
    for (int c = 0; c < blended.channels(); ++c) out[c * plane + p] = closeup[c * plane + p];
  }
  return out;
}

BlendPlan build_blend_plan(const ViewGeometry& geo, const Codec& codec) {
  const int n = geo.num_views();
  const int r = codec.ratio();
  if (geo.image_width() % r != 0 || geo.image_height() % r != 0) {
    throw ConfigError(kModule, "image size not divisible by codec ratio " + std::to_string(r));
  }
  BlendPlan plan;
  plan.targets.resize(static_cast<std::size_t>(n));
  plan.coverage.resize(static_cast<std::size_t>(n));
  plan.closeup.resize(static_cast<std::size_t>(n));
  const LatentField ones({1, geo.image_height(), geo.image_width()}, Space::image, 1.0);
  for (int i = 0; i < n; ++i) {
    const WarpResult self = geo.warp(ones, i, i);
    plan.coverage[i] = downsample_area(self.mask, r);
    auto& list = plan.targets[i];
    list.push_back({i, downsample_area(geo.occlusion(i, i), r)});
    for (int k : geo.sources(i)) {
      if (k == i) continue;
      const Map2D validity = downsample_area(geo.warp(ones, k, i).mask, r);
      Map2D w = downsample_area(geo.occlusion(k, i), r);
      for (std::size_t p = 0; p < w.size(); ++p) {
        if (validity.data[p] < 1.0) w.data[p] = 0.0;
      }
      list.push_back({k, std::move(w)});
    }
    plan.closeup[i] = geo.closeup_source(i);
  }
  return plan;
}

DenoiserPool::DenoiserPool(std::vector<Denoiser*> denoisers) : members_(std::move(denoisers)) {
  if (members_.empty()) throw ConfigError(kModule, "denoiser pool is empty");
  busy_.assign(members_.size(), false);
  shared_ = std::all_of(members_.begin(), members_.end(),
                        [](Denoiser* d) { return d->concurrency() == Concurrency::concurrent_safe; });
}

int DenoiserPool::max_parallel(int workers) const {
  return shared_ ? std::max(1, workers) : std::clamp(workers, 1, static_cast<int>(members_.size()));
}

DenoiserResponse DenoiserPool::denoise(const DenoiserRequest& req) {
  if (shared_) return members_.front()->denoise(req);
  std::size_t slot = 0;
  {
    std::unique_lock<std::mutex> lock(mu_);
    cv_.wait(lock, [&] { return std::find(busy_.begin(), busy_.end(), false) != busy_.end(); });
    slot = static_cast<std::size_t>(std::find(busy_.begin(), busy_.end(), false) - busy_.begin());
    busy_[slot] = true;
  }
  struct Release {
    DenoiserPool* pool;
    std::size_t slot;
    ~Release() {
      {
        std::lock_guard<std::mutex> lock(pool->mu_);
        pool->busy_[slot] = false;
      }
      pool->cv_.notify_one();
    }
  } release{this, slot};
  return members_[slot]->denoise(req);
}

void multiview_step(std::vector<ViewState>& states, SamplerContext& ctx, const SamplingPolicy& policy,
                    int t) {
  const Schedule& s = *ctx.schedule;
  const int n = static_cast<int>(states.size());
  if (n == 0) return;
  if (t < 1 || t > s.num_steps()) throw ContractError(kModule, "step timestep out of range");
  const int workers = ctx.denoisers->max_parallel(ctx.workers);

  auto request = [&](int v) {
    DenoiserRequest req;
    req.view_id = states[v].view_id;
    req.timestep = t;
    req.latent = states[v].latent;
    if (static_cast<std::size_t>(v) < ctx.conditions.size()) req.conditions = ctx.conditions[v];
    req.prompt = ctx.prompt;
    return req;
  };

  // (a) Denoise every view; the reference view goes first when its
  // attention features are shared.
  std::vector<LatentField> eps(static_cast<std::size_t>(n));
  auto check_noise = [&](const LatentField& e, int v) {
    if (e.shape() != states[v].latent.shape()) {
      throw ContractError(kModule, "denoiser returned shape " + to_string(e.shape()) + " for view " +
                                       std::to_string(states[v].view_id));
    }
    if (!e.all_finite()) {
      throw NumericalError(kModule, "denoiser returned non-finite noise for view " +
                                        std::to_string(states[v].view_id) + " at t=" + std::to_string(t));
    }
  };
  const bool with_reference = policy.reference_attention && policy.reference_view < n;
  std::optional<AttentionFeatures> ref_features;
  if (with_reference) {
    const int rv = policy.reference_view;
    DenoiserResponse r = ctx.denoisers->denoise(request(rv));
    check_noise(r.eps, rv);
    eps[rv] = std::move(r.eps);
    ref_features = std::move(r.features);
  }
  parallel_for(n, workers, [&](int v) {
    if (with_reference && v == policy.reference_view) return;
    DenoiserRequest req = request(v);
    if (ref_features) req.reference_features = ref_features;
    DenoiserResponse r = ctx.denoisers->denoise(req);
    check_noise(r.eps, v);
    eps[v] = std::move(r.eps);
  });

  const bool guided = is_guided_step(policy, t, s.num_steps());
  StepRecord record;
  record.t = t;
  record.guided = guided;
  std::vector<LatentField> next(static_cast<std::size_t>(n));

  if (!guided) {
    // (b) Original step: every view follows its own prediction.
    for (int v = 0; v < n; ++v) next[v] = ddim_step(states[v].latent, eps[v], t, s);
    if (ctx.observer) {
      for (int v = 0; v < n; ++v) record.predicted.push_back(predict_original(states[v].latent, eps[v], t, s));
      record.noise = eps;
    }
  } else {
    // (c) Guided step: transport, blend, replace, derive eps'.
    if (!ctx.plan || static_cast<int>(ctx.plan->targets.size()) != n) {
      throw ContractError(kModule, "blend plan does not match the view count");
    }
    const double sa = std::sqrt(s.alpha_bar(t));
    std::vector<LatentField> x0(static_cast<std::size_t>(n));
    std::vector<LatentField> mean(static_cast<std::size_t>(n));
    for (int v = 0; v < n; ++v) {
      x0[v] = predict_original(states[v].latent, eps[v], t, s);
      mean[v] = scaled(states[v].latent, 1.0 / sa);
    }
    std::vector<LatentField> blended(static_cast<std::size_t>(n));
    std::vector<LatentField> noise(static_cast<std::size_t>(n));
    const double sa_prev = std::sqrt(s.alpha_bar(t - 1));
    const double sn_prev = std::sqrt(1.0 - s.alpha_bar(t - 1));
    parallel_for(n, ctx.workers, [&](int i) {
      const auto& sources = ctx.plan->targets[i];
      std::vector<BlendTerm> terms;
      terms.reserve(sources.size());
      terms.push_back({x0[i], mean[i], sources.front().weight});
      LatentField closeup;
      const Map2D* closeup_weight = nullptr;
      for (std::size_t k = 1; k < sources.size(); ++k) {
        const int src = sources[k].view;
        BlendTerm term{transport_signal(x0[src], *ctx.codec, src, i, *ctx.geometry).latent,
                       transport_signal(mean[src], *ctx.codec, src, i, *ctx.geometry).latent,
                       sources[k].weight};
        if (policy.closeup_replacement && src == ctx.plan->closeup[i]) {
          closeup = term.transported;
          closeup_weight = &sources[k].weight;
        }
        terms.push_back(std::move(term));
      }
      LatentField mixed = blend_predictions(x0[i], terms, &ctx.plan->coverage[i]);
      LatentField target = mixed;
      if (closeup_weight) target = apply_upper_body_replacement(mixed, closeup, *closeup_weight);
      noise[i] = cg_noise(states[i].latent, policy.replace_before_noise ? target : mixed, t, s);
      LatentField out = target;
      for (std::size_t e = 0; e < out.size(); ++e) out[e] = sa_prev * target[e] + sn_prev * noise[i][e];
      next[i] = std::move(out);
      blended[i] = std::move(target);
    });
    if (ctx.observer) {
      record.predicted = std::move(x0);
      record.blended = std::move(blended);
      record.noise = std::move(noise);
    }
  }

  for (int v = 0; v < n; ++v) {
    if (!next[v].all_finite()) {
      throw NumericalError(kModule, "non-finite latent for view " + std::to_string(states[v].view_id) +
                                        " at t=" + std::to_string(t));
    }
  }
  // Single commit: all views advance together.
  for (int v = 0; v < n; ++v) states[v].latent = std::move(next[v]);
  if (ctx.observer) ctx.observer(record);
}

void run_multiview(std::vector<ViewState>& states, SamplerContext& ctx, const SamplingPolicy& policy,
                   const PreStepHook& hook) {
  policy.validate();
  for (int t = ctx.schedule->num_steps(); t >= 1; --t) {
    if (hook) hook(states, t);
    multiview_step(states, ctx, policy, t);
  }
}

std::vector<LatentField> initial_latents(int views, const Shape& latent_shape, std::uint64_t seed) {
  std::mt19937_64 rng(seed);
  std::normal_distribution<double> normal(0.0, 1.0);
  std::vector<LatentField> out;
  out.reserve(static_cast<std::size_t>(views));
  for (int v = 0; v < views; ++v) {
    LatentField f(latent_shape, Space::latent);
    for (auto& x : f.storage()) x = normal(rng);
    out.push_back(std::move(f));
  }
  return out;
}

std::vector<LatentField> run_2d_degenerate(int views, Denoiser& denoiser, const Schedule& s,
                                           const SamplingPolicy& policy, const Shape& shape,
                                           std::uint64_t seed) {
  if (views < 1) throw ConfigError(kModule, "need at least one view");
  IdentityGeometry geo(views, shape.width, shape.height);
  IdentityCodec codec;
  const BlendPlan plan = build_blend_plan(geo, codec);
  DenoiserPool pool(denoiser);
  SamplerContext ctx;
  ctx.schedule = &s;
  ctx.geometry = &geo;
  ctx.codec = &codec;
  ctx.denoisers = &pool;
  ctx.plan = &plan;

  std::vector<ViewState> states;
  auto init = initial_latents(views, shape, seed);
  for (int v = 0; v < views; ++v) states.push_back({v, std::move(init[v]), false, true});
  run_multiview(states, ctx, policy);

  std::vector<LatentField> out;
  for (auto& st : states) out.push_back(codec.decode(st.latent));
  return out;
}

}  // namespace mvd
