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

#include "mvd/scenario.hpp"

#include <cmath>
#include <limits>

namespace mvd {
namespace {

constexpr const char* kModule = "pipeline";

}  // namespace

GaussianMixtureModel cosine_modes(const Shape& shape, int count, double amplitude) {
  if (count < 1) throw ConfigError(kModule, "mixture needs at least one mode");
  GaussianMixtureModel g;
  for (int k = 0; k < count; ++k) {
    LatentField m(shape, Space::latent);
    for (int c = 0; c < shape.channels; ++c)
      for (int y = 0; y < shape.height; ++y)
        for (int x = 0; x < shape.width; ++x)
          m.at(c, y, x) = amplitude * std::cos(2.0 * M_PI * (k + 1) * (x + 2 * y + 7 * c) / 16.0 + k);
    g.components.push_back(std::move(m));
    g.weights.push_back(1.0 / count);
  }
  return g;
}

int nearest_component(const LatentField& x, const GaussianMixtureModel& gmm, double* dist) {
  int best = -1;
  double bd = std::numeric_limits<double>::infinity();
  for (std::size_t k = 0; k < gmm.components.size(); ++k) {
    const double d = max_abs_diff(x, gmm.components[k]);
    if (d < bd) {
      bd = d;
      best = static_cast<int>(k);
    }
  }
  if (dist) *dist = bd;
  return best;
}

double procedural_texture(int variant, int channel, const Vec3& p) {
  // Distinct base hue per variant plus a smooth pattern along a
  // variant-specific axis.
  static constexpr double kHue[4][3] = {{0.75, 0.35, 0.25}, {0.25, 0.55, 0.8}, {0.35, 0.75, 0.3}, {0.7, 0.65, 0.2}};
  const double a = 0.9 * variant + 0.3;
  const Vec3 axis = Vec3(std::cos(a), 0.6 * std::sin(1.7 * a), std::sin(a)).normalized();
  const Vec3 side = axis.unitOrthogonal();
  const double u = (3.0 + variant) * axis.dot(p) + 2.1 * channel + 1.3 * variant;
  const double v = (2.0 + 0.5 * variant) * side.dot(p) - 0.7 * channel;
  return kHue[variant % 4][channel % 3] + 0.1 * std::sin(u) + 0.05 * std::cos(v);
}

LatentField render_procedural(const GBuffer& g, int variant) {
  LatentField img({3, g.height, g.width}, Space::image);
  for (int y = 0; y < g.height; ++y) {
    for (int x = 0; x < g.width; ++x) {
      const std::size_t i = g.index(x, y);
      if (!g.mask[i]) continue;
      for (int c = 0; c < 3; ++c) img.at(c, y, x) = procedural_texture(variant, c, g.hit[i]);
    }
  }
  return img;
}

SceneSetup make_scene(TriMesh mesh, const SceneParams& p) {
  if (p.variants < 1) throw ConfigError(kModule, "scene needs at least one texture variant");
  mesh.validate();
  SceneSetup s;
  const RigParams rp =
      frame_rig(mesh, p.per_track, p.vfov_deg, p.width, p.height, p.upper_fraction, p.elevation_deg, p.margin);
  s.rig = build_rig(rp);
  s.geometry = std::make_unique<MeshGeometry>(mesh, s.rig, p.occlusion);
  s.mesh = std::move(mesh);
  s.renders.resize(static_cast<std::size_t>(p.variants));
  for (int k = 0; k < p.variants; ++k)
    for (int v = 0; v < s.rig.size(); ++v) s.renders[k].push_back(render_procedural(s.geometry->gbuffer(v), k));
  for (const Camera& cam : s.rig.views) {
    ConditionMaps c = render_conditions(s.mesh, cam);
    s.conditions.push_back({{"depth", std::move(c.depth)}, {"normal", std::move(c.normal)}});
  }
  return s;
}

SceneSetup make_sphere_scene(int subdivisions, const SceneParams& params) {
  return make_scene(make_icosphere(subdivisions), params);
}

AblationSetup ablation_setup(Ablation a) {
  AblationSetup s;
  s.policy.reference_attention = false;
  switch (a) {
    case Ablation::conditions_only:
      s.name = "conditions";
      s.policy.guidance = false;
      break;
    case Ablation::cg_noise:
      s.name = "cg_noise";
      break;
    case Ablation::optimization:
      s.name = "optimization";
      s.optimize = true;
      break;
    case Ablation::full:
      s.name = "full";
      s.optimize = true;
      s.policy.reference_attention = true;
      break;
  }
  return s;
}

std::vector<Ablation> all_ablations() {
  return {Ablation::conditions_only, Ablation::cg_noise, Ablation::optimization, Ablation::full};
}

SampleOutput sample_views(const SampleInputs& in) {
  if (!in.schedule || !in.geometry || !in.codec || !in.denoisers) {
    throw ContractError(kModule, "sampling inputs are incomplete");
  }
  if (in.optimizer && !in.rig) throw ContractError(kModule, "latent optimization needs a view rig");
  in.policy.validate();
  if (in.optimizer) in.optimizer->validate();

  const int n = in.geometry->num_views();
  const BlendPlan plan = build_blend_plan(*in.geometry, *in.codec);
  SamplerContext ctx;
  ctx.schedule = in.schedule;
  ctx.geometry = in.geometry;
  ctx.codec = in.codec;
  ctx.denoisers = in.denoisers;
  ctx.plan = &plan;
  ctx.conditions = in.conditions;
  ctx.prompt = in.prompt;
  ctx.workers = in.workers;
  ctx.observer = in.observer;

  std::vector<ViewState> states;
  std::vector<LatentField> init = initial_latents(n, in.latent_shape, in.seed);
  for (int v = 0; v < n; ++v) {
    ViewState s;
    s.view_id = v;
    s.latent = std::move(init[static_cast<std::size_t>(v)]);
    s.full_body = in.rig ? in.rig->is_full_body(v) : true;
    states.push_back(std::move(s));
  }

  SampleOutput out;
  PreStepHook hook;
  if (in.optimizer) {
    hook = [&](std::vector<ViewState>& st, int t) {
      if (!is_optimization_step(*in.optimizer, t)) return;
      auto rows = optimization_event(st, *in.rig, *in.codec, *in.geometry, *in.optimizer, t,
                                     in.schedule->num_steps(), in.workers);
      out.loss_trace.insert(out.loss_trace.end(), rows.begin(), rows.end());
    };
  }
  // Rollout step by step so a failure can name the step it happened in.
  for (int t = in.schedule->num_steps(); t >= 1; --t) {
    try {
      if (hook) hook(states, t);
      multiview_step(states, ctx, in.policy, t);
    } catch (const Error& e) {
      std::string what = e.what();
      const std::string prefix = e.module() + ": ";
      if (what.rfind(prefix, 0) == 0) what = what.substr(prefix.size());
      throw Error(e.kind(), e.module(), "sampling step t=" + std::to_string(t) + ": " + what);
    }
  }

  for (auto& s : states) {
    out.images.push_back(in.codec->decode(s.latent));
    out.latents.push_back(std::move(s.latent));
  }
  return out;
}

}  // namespace mvd
