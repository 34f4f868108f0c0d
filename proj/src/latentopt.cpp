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

#include "mvd/latentopt.hpp"

#include <algorithm>
#include <cmath>
#include <iomanip>
#include <set>

namespace mvd {
namespace {

constexpr const char* kModule = "latentopt";

// One direction of the loss: view `dst` against the warp of `src` into it.
struct Residual {
  LatentField r;  // dst - warped src on valid pixels, 0 elsewhere
  int valid = 0;
  double loss = 0.0;
};

Residual residual(const LatentField& img_dst, const LatentField& img_src, int src, int dst,
                  const ViewGeometry& geo) {
  const WarpResult w = geo.warp(img_src, src, dst);
  require_same_shape(img_dst, w.image, kModule, "pair loss");
  Residual out{LatentField(img_dst.shape(), Space::image), 0, 0.0};
  const std::size_t plane = img_dst.shape().plane();
  double sum = 0.0;
  for (std::size_t p = 0; p < plane; ++p) {
    if (!(w.mask.data[p] > 0.0)) continue;
    ++out.valid;
    for (int c = 0; c < img_dst.channels(); ++c) {
      const std::size_t e = c * plane + p;
      const double d = img_dst[e] - w.image[e];
      out.r[e] = d;
      sum += d * d;
    }
  }
  if (out.valid > 0) out.loss = sum / out.valid;
  return out;
}

double precondition(const PairLoss& l, const Codec& codec) {
  double n = 0.0;
  int dirs = 0;
  for (int v : {l.valid_ij, l.valid_ji}) {
    if (v > 0) {
      n += v;
      ++dirs;
    }
  }
  const double r = codec.ratio();
  return dirs == 0 ? 0.0 : (n / dirs) / (4.0 * r * r);
}

double angle_mod(double deg) {
  double a = std::fmod(deg, 360.0);
  if (a < 0.0) a += 360.0;
  return a;
}

bool near_angle(double deg, double target) {
  const double d = std::abs(angle_mod(deg) - target);
  return std::min(d, 360.0 - d) < 1e-6;
}

}  // namespace

void OptimizerConfig::validate() const {
  if (!(step > 0.0) || !std::isfinite(step)) throw ConfigError(kModule, "step must be finite and > 0");
  if (iterations < 1) throw ConfigError(kModule, "iterations must be >= 1");
  if (!(fd_epsilon > 0.0)) throw ConfigError(kModule, "fd_epsilon must be > 0");
  if (max_halvings < 0) throw ConfigError(kModule, "max_halvings must be >= 0");
  if (period < 1) throw ConfigError(kModule, "period must be >= 1");
  if (!(side_lock_fraction >= 0.0 && side_lock_fraction <= 1.0)) {
    throw ConfigError(kModule, "side_lock_fraction must lie in [0,1]");
  }
}

PairLoss latent_pair_loss(const LatentField& x_i, const LatentField& x_j, int i, int j, const Codec& codec,
                          const ViewGeometry& geo) {
  const LatentField d_i = codec.decode(x_i);
  const LatentField d_j = codec.decode(x_j);
  const Residual a = residual(d_i, d_j, j, i, geo);
  const Residual b = residual(d_j, d_i, i, j, geo);
  return {a.loss + b.loss, a.valid, b.valid};
}

PairGradient latent_pair_gradient(const LatentField& x_i, const LatentField& x_j, int i, int j,
                                  const Codec& codec, const ViewGeometry& geo) {
  const LatentField d_i = codec.decode(x_i);
  const LatentField d_j = codec.decode(x_j);
  Residual a = residual(d_i, d_j, j, i, geo);
  Residual b = residual(d_j, d_i, i, j, geo);

  // dL/dD_i = 2 r_a / n_a - W_{i->j}^T (2 r_b / n_b), and symmetrically.
  const double ka = a.valid > 0 ? 2.0 / a.valid : 0.0;
  const double kb = b.valid > 0 ? 2.0 / b.valid : 0.0;
  LatentField g_i(d_i.shape(), Space::image);
  LatentField g_j(d_j.shape(), Space::image);
  for (std::size_t e = 0; e < g_i.size(); ++e) g_i[e] = ka * a.r[e];
  for (std::size_t e = 0; e < g_j.size(); ++e) g_j[e] = kb * b.r[e];
  for (auto& v : a.r.storage()) v *= -ka;
  for (auto& v : b.r.storage()) v *= -kb;
  const LatentField back_i = geo.warp_adjoint(b.r, i, j);
  const LatentField back_j = geo.warp_adjoint(a.r, j, i);
  for (std::size_t e = 0; e < g_i.size(); ++e) g_i[e] += back_i[e];
  for (std::size_t e = 0; e < g_j.size(); ++e) g_j[e] += back_j[e];

  PairGradient out;
  out.loss = {a.loss + b.loss, a.valid, b.valid};
  out.grad_i = codec.decode_adjoint(g_i);
  out.grad_j = codec.decode_adjoint(g_j);
  return out;
}

PairGradient latent_pair_gradient_fd(const LatentField& x_i, const LatentField& x_j, int i, int j,
                                     const Codec& codec, const ViewGeometry& geo, double epsilon) {
  PairGradient out;
  out.loss = latent_pair_loss(x_i, x_j, i, j, codec, geo);
  auto diff = [&](const LatentField& x, bool first) {
    LatentField g(x.shape(), Space::latent);
    LatentField probe = x;
    for (std::size_t e = 0; e < x.size(); ++e) {
      const double keep = probe[e];
      probe[e] = keep + epsilon;
      const double up = first ? latent_pair_loss(probe, x_j, i, j, codec, geo).value
                              : latent_pair_loss(x_i, probe, i, j, codec, geo).value;
      probe[e] = keep - epsilon;
      const double down = first ? latent_pair_loss(probe, x_j, i, j, codec, geo).value
                                : latent_pair_loss(x_i, probe, i, j, codec, geo).value;
      probe[e] = keep;
      g[e] = (up - down) / (2.0 * epsilon);
    }
    return g;
  };
  out.grad_i = diff(x_i, true);
  out.grad_j = diff(x_j, false);
  return out;
}

PairResult optimize_pair(const LatentField& x_i, const LatentField& x_j, int i, int j, bool locked_i,
                         bool locked_j, const Codec& codec, const ViewGeometry& geo,
                         const OptimizerConfig& config) {
  config.validate();
  PairResult res{x_i, x_j, 0.0, 0.0, 0, 0, {}};
  const PairLoss start = latent_pair_loss(x_i, x_j, i, j, codec, geo);
  res.loss_before = res.loss_after = start.value;
  if (locked_i && locked_j) {
    res.note = "both-locked";
    return res;
  }
  if (start.empty_overlap()) {
    res.note = "empty-overlap";
    return res;
  }

  double current = start.value;
  double eta = config.step * precondition(start, codec);
  for (int it = 0; it < config.iterations; ++it) {
    const PairGradient g = config.method == GradientMethod::analytic
                               ? latent_pair_gradient(res.x_i, res.x_j, i, j, codec, geo)
                               : latent_pair_gradient_fd(res.x_i, res.x_j, i, j, codec, geo, config.fd_epsilon);
    bool accepted = false;
    for (int h = 0; h <= config.max_halvings; ++h) {
      LatentField ci = res.x_i;
      LatentField cj = res.x_j;
      if (!locked_i) {
        for (std::size_t e = 0; e < ci.size(); ++e) ci[e] -= eta * g.grad_i[e];
      }
      if (!locked_j) {
        for (std::size_t e = 0; e < cj.size(); ++e) cj[e] -= eta * g.grad_j[e];
      }
      const double trial = latent_pair_loss(ci, cj, i, j, codec, geo).value;
      if (trial <= current) {
        res.x_i = std::move(ci);
        res.x_j = std::move(cj);
        current = trial;
        accepted = true;
        break;
      }
      eta *= 0.5;
      ++res.halvings;
    }
    ++res.iterations;
    if (!accepted) break;
  }
  res.loss_after = current;
  return res;
}

bool is_optimization_step(const OptimizerConfig& config, int t) { return t >= 1 && t % config.period == 0; }

std::vector<std::pair<int, int>> same_track_pairs(const ViewRig& rig) {
  std::set<std::pair<int, int>> seen;
  std::vector<std::pair<int, int>> out;
  const int n = rig.per_track;
  if (n < 2) return out;
  for (int base = 0; base + n <= rig.size(); base += n) {
    for (int k = 0; k < n; ++k) {
      const int a = base + k;
      const int b = base + (k + 1) % n;
      const std::pair<int, int> p{std::min(a, b), std::max(a, b)};
      if (seen.insert(p).second) out.push_back(p);
    }
  }
  return out;
}

bool is_front_or_back(const ViewRig& rig, int v) {
  const double a = rig.azimuths_deg.at(static_cast<std::size_t>(v));
  return near_angle(a, 0.0) || near_angle(a, 180.0);
}

bool is_side(const ViewRig& rig, int v) {
  const double a = rig.azimuths_deg.at(static_cast<std::size_t>(v));
  return near_angle(a, 90.0) || near_angle(a, 270.0);
}

std::vector<PairTrace> optimization_event(std::vector<ViewState>& states, const ViewRig& rig,
                                          const Codec& codec, const ViewGeometry& geo,
                                          const OptimizerConfig& config, int t, int num_steps,
                                          int workers) {
  config.validate();
  const int n = static_cast<int>(states.size());
  if (n != rig.size()) {
    throw ContractError(kModule, "event has " + std::to_string(n) + " states for a rig of " +
                                     std::to_string(rig.size()) + " views");
  }
  const double elapsed = static_cast<double>(num_steps - t) / num_steps;
  const bool late = elapsed >= config.side_lock_fraction;
  for (int v = 0; v < n; ++v) {
    if (is_front_or_back(rig, v) && (config.lock_front_back_at_start || late)) states[v].locked = true;
    if (is_side(rig, v) && late) states[v].locked = true;
  }

  std::vector<LatentField> work;
  work.reserve(static_cast<std::size_t>(n));
  for (const auto& s : states) work.push_back(s.latent);
  std::vector<PairTrace> trace;

  auto run_round = [&](const std::vector<std::pair<int, int>>& pairs, int phase, bool ref_locked) {
    std::vector<PairResult> results(pairs.size());
    parallel_for(static_cast<int>(pairs.size()), workers, [&](int k) {
      const auto [a, b] = pairs[static_cast<std::size_t>(k)];
      results[static_cast<std::size_t>(k)] =
          optimize_pair(work[a], work[b], a, b, states[a].locked, ref_locked || states[b].locked, codec, geo,
                        config);
    });
    for (std::size_t k = 0; k < pairs.size(); ++k) {
      const auto [a, b] = pairs[k];
      work[a] = std::move(results[k].x_i);
      work[b] = std::move(results[k].x_j);
      trace.push_back({t, phase, a, b, results[k].loss_before, results[k].loss_after, results[k].iterations,
                       results[k].halvings, results[k].note});
    }
  };

  // Pairs sharing a view are serialized by splitting the list into rounds of
  // disjoint pairs, keeping list order inside each round.
  std::vector<std::pair<int, int>> pending = same_track_pairs(rig);
  while (!pending.empty()) {
    std::vector<std::pair<int, int>> round, rest;
    std::set<int> used;
    for (const auto& p : pending) {
      if (used.count(p.first) || used.count(p.second)) {
        rest.push_back(p);
        continue;
      }
      used.insert(p.first);
      used.insert(p.second);
      round.push_back(p);
    }
    run_round(round, 1, false);
    pending = std::move(rest);
  }

  std::vector<std::pair<int, int>> cross;
  for (int i = 0; i < n; ++i) {
    if (rig.is_full_body(i) && i + rig.per_track < n && !rig.is_full_body(i + rig.per_track)) {
      cross.emplace_back(i, i + rig.per_track);
    }
  }
  run_round(cross, 2, true);

  for (int v = 0; v < n; ++v) {
    if (!states[v].locked) states[v].latent = std::move(work[v]);
  }
  return trace;
}

void write_loss_trace_csv(std::ostream& os, const std::vector<PairTrace>& rows) {
  os << "t,phase,view_i,view_j,loss_before,loss_after,iterations,halvings,note\n";
  const auto flags = os.flags();
  const auto prec = os.precision();
  os << std::setprecision(17);
  for (const auto& r : rows) {
    os << r.t << ',' << r.phase << ',' << r.view_i << ',' << r.view_j << ',' << r.loss_before << ','
       << r.loss_after << ',' << r.iterations << ',' << r.halvings << ',' << r.note << '\n';
  }
  os.flags(flags);
  os.precision(prec);
}

}  // namespace mvd
