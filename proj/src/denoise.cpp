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

#include "mvd/denoise.hpp"

#include <algorithm>
#include <cmath>
#include <limits>
#include <numeric>

#include "mvd/warpfield.hpp"

namespace mvd {
namespace {

constexpr const char* kModule = "denoise";

void check_timestep(const DenoiserRequest& req, const Schedule& s) {
  if (req.timestep < 1 || req.timestep > s.num_steps()) {
    throw ContractError(kModule, "request timestep " + std::to_string(req.timestep) +
                                     " outside schedule range [1," +
                                     std::to_string(s.num_steps()) + "]");
  }
}

}  // namespace

DenoiserResponse oracle_denoise(const DenoiserRequest& req, const LatentField& target,
                                const Schedule& s) {
  require_same_shape(req.latent, target, kModule, "oracle_denoise");
  check_timestep(req, s);
  if (s.alpha_bar(req.timestep) >= 1.0) {
    throw NumericalError(kModule, "oracle_denoise undefined at alpha_bar=1");
  }
  DenoiserResponse r;
  r.eps = noise_from_original(req.latent, target, req.timestep, s);
  return r;
}

void GaussianMixtureModel::validate() const {
  if (components.empty()) throw ConfigError(kModule, "mixture needs at least one component");
  if (weights.size() != components.size()) {
    throw ConfigError(kModule, "mixture weight count does not match component count");
  }
  double sum = 0.0;
  for (double w : weights) {
    if (!(w > 0.0)) throw ConfigError(kModule, "mixture weights must be positive");
    sum += w;
  }
  if (std::abs(sum - 1.0) > 1e-9) throw ConfigError(kModule, "mixture weights must sum to 1");
  for (const auto& c : components) {
    if (c.shape() != components.front().shape()) {
      throw ConfigError(kModule, "mixture components must share one shape");
    }
  }
}

GmmPosterior gmm_posterior(const LatentField& x_t, const GaussianMixtureModel& gmm, int t,
                           const Schedule& s) {
  const std::size_t k_count = gmm.components.size();
  const double ab = s.alpha_bar(t);
  const double sa = std::sqrt(ab);
  const double var = 1.0 - ab;
  if (!(var > 0.0)) throw NumericalError(kModule, "posterior undefined at alpha_bar=1");

  std::vector<double> logits(k_count);
  for (std::size_t k = 0; k < k_count; ++k) {
    const LatentField& c = gmm.components[k];
    require_same_shape(x_t, c, kModule, "gmm_denoise");
    double d2 = 0.0;
    for (std::size_t i = 0; i < c.size(); ++i) {
      const double d = x_t[i] - sa * c[i];
      d2 += d * d;
    }
    logits[k] = std::log(gmm.weights[k]) - d2 / (2.0 * var);
  }
  const double mx = *std::max_element(logits.begin(), logits.end());
  if (!std::isfinite(mx)) {
    throw NumericalError(kModule, "all responsibilities underflow at timestep " + std::to_string(t));
  }
  double z = 0.0;
  for (double l : logits) z += std::exp(l - mx);
  const double lse = mx + std::log(z);

  GmmPosterior post;
  post.log_responsibilities.resize(k_count);
  post.responsibilities.resize(k_count);
  for (std::size_t k = 0; k < k_count; ++k) {
    post.log_responsibilities[k] = logits[k] - lse;
    post.responsibilities[k] = std::exp(post.log_responsibilities[k]);
  }
  post.mean = LatentField(x_t.shape(), x_t.space());
  for (std::size_t k = 0; k < k_count; ++k) {
    const double w = post.responsibilities[k];
    if (w == 0.0) continue;
    const LatentField& c = gmm.components[k];
    for (std::size_t i = 0; i < c.size(); ++i) post.mean[i] += w * c[i];
  }
  return post;
}

DenoiserResponse gmm_denoise(const DenoiserRequest& req, const GaussianMixtureModel& gmm,
                             const Schedule& s) {
  check_timestep(req, s);
  GmmPosterior post = gmm_posterior(req.latent, gmm, req.timestep, s);
  const auto k_count = static_cast<Eigen::Index>(gmm.components.size());

  Eigen::MatrixXd own_keys(k_count, 1);
  for (Eigen::Index k = 0; k < k_count; ++k) own_keys(k, 0) = post.log_responsibilities[k];

  LatentField x0 = post.mean;
  if (req.reference_features && req.reference_features->keys.rows() == k_count) {
    // Attend jointly over the reference view's keys and our own; the query is
    // the unit vector so the logits are the keys themselves.
    const Eigen::MatrixXd q = Eigen::MatrixXd::Ones(1, 1);
    const Eigen::MatrixXd w = extended_attention_weights(q, own_keys, req.reference_features->keys);
    x0 = LatentField(req.latent.shape(), req.latent.space());
    for (Eigen::Index k = 0; k < k_count; ++k) {
      const double r = w(0, k) + w(0, k_count + k);
      if (r == 0.0) continue;
      const LatentField& c = gmm.components[static_cast<std::size_t>(k)];
      for (std::size_t i = 0; i < c.size(); ++i) x0[i] += r * c[i];
    }
  }

  DenoiserResponse r;
  r.eps = noise_from_original(req.latent, x0, req.timestep, s);
  r.features = AttentionFeatures{own_keys, own_keys};
  return r;
}

Eigen::MatrixXd extended_attention_weights(const Eigen::MatrixXd& q, const Eigen::MatrixXd& k,
                                           const Eigen::MatrixXd& k_ref) {
  const Eigen::Index c = q.cols();
  if (k.cols() != c || (k_ref.rows() > 0 && k_ref.cols() != c)) {
    throw ContractError(kModule, "attention column dimension mismatch");
  }
  const Eigen::Index r = k_ref.rows();
  const Eigen::Index m = k.rows();
  if (r + m == 0) throw ContractError(kModule, "attention needs at least one key");

  Eigen::MatrixXd keys(r + m, c);
  if (r > 0) keys.topRows(r) = k_ref;
  keys.bottomRows(m) = k;

  Eigen::MatrixXd logits = (q * keys.transpose()) / std::sqrt(static_cast<double>(c));
  for (Eigen::Index row = 0; row < logits.rows(); ++row) {
    const double mx = logits.row(row).maxCoeff();
    logits.row(row) = (logits.row(row).array() - mx).exp();
    logits.row(row) /= logits.row(row).sum();
  }
  return logits;
}

Eigen::MatrixXd extended_attention(const Eigen::MatrixXd& q, const Eigen::MatrixXd& k,
                                   const Eigen::MatrixXd& v, const Eigen::MatrixXd& k_ref,
                                   const Eigen::MatrixXd& v_ref) {
  const Eigen::Index c = q.cols();
  if (v.cols() != c || v.rows() != k.rows() || (v_ref.rows() > 0 && v_ref.cols() != c) ||
      v_ref.rows() != k_ref.rows()) {
    throw ContractError(kModule, "attention key/value dimension mismatch");
  }
  const Eigen::MatrixXd w = extended_attention_weights(q, k, k_ref);
  Eigen::MatrixXd values(v_ref.rows() + v.rows(), c);
  if (v_ref.rows() > 0) values.topRows(v_ref.rows()) = v_ref;
  values.bottomRows(v.rows()) = v;
  return w * values;
}

DenoiserResponse OracleDenoiser::denoise(const DenoiserRequest& req) {
  if (targets_.size() == 1) return oracle_denoise(req, targets_.front(), schedule_);
  if (req.view_id < 0 || req.view_id >= static_cast<int>(targets_.size())) {
    throw ConfigError(kModule, "no oracle target for view " + std::to_string(req.view_id));
  }
  return oracle_denoise(req, targets_[static_cast<std::size_t>(req.view_id)], schedule_);
}

GmmDenoiser::GmmDenoiser(GaussianMixtureModel gmm, Schedule s)
    : gmm_(std::move(gmm)), schedule_(std::move(s)) {
  gmm_.validate();
}

DenoiserResponse GmmDenoiser::denoise(const DenoiserRequest& req) {
  return gmm_denoise(req, gmm_, schedule_);
}

MeshOracleDenoiser::MeshOracleDenoiser(const std::vector<std::vector<LatentField>>& renders,
                                       std::vector<double> variant_weights, const Codec& codec,
                                       Schedule s)
    : schedule_(std::move(s)) {
  if (renders.empty()) throw ConfigError(kModule, "mesh oracle needs at least one texture variant");
  if (variant_weights.empty()) {
    variant_weights.assign(renders.size(), 1.0 / static_cast<double>(renders.size()));
  }
  if (variant_weights.size() != renders.size()) {
    throw ConfigError(kModule, "mesh oracle variant weight count mismatch");
  }
  const std::size_t views = renders.front().size();
  for (const auto& r : renders) {
    if (r.size() != views) throw ConfigError(kModule, "texture variants cover different view counts");
  }
  per_view_.resize(views);
  for (std::size_t v = 0; v < views; ++v) {
    GaussianMixtureModel& g = per_view_[v];
    g.weights = variant_weights;
    for (const auto& r : renders) g.components.push_back(codec.encode(r[v]));
    g.validate();
  }
}

const GaussianMixtureModel& MeshOracleDenoiser::view_model(int view_id) const {
  if (view_id < 0 || view_id >= num_views()) {
    throw ConfigError(kModule, "no render for view " + std::to_string(view_id));
  }
  return per_view_[static_cast<std::size_t>(view_id)];
}

DenoiserResponse MeshOracleDenoiser::denoise(const DenoiserRequest& req) {
  return gmm_denoise(req, view_model(req.view_id), schedule_);
}

DenoiserResponse mesh_oracle_denoise(const DenoiserRequest& req,
                                     const std::vector<std::vector<LatentField>>& renders,
                                     std::vector<double> variant_weights, const Codec& codec,
                                     const Schedule& s) {
  for (const auto& r : renders) {
    if (req.view_id < 0 || req.view_id >= static_cast<int>(r.size())) {
      throw ConfigError(kModule, "no render for view " + std::to_string(req.view_id));
    }
  }
  GaussianMixtureModel g;
  g.weights = variant_weights.empty()
                  ? std::vector<double>(renders.size(), 1.0 / static_cast<double>(renders.size()))
                  : std::move(variant_weights);
  for (const auto& r : renders) g.components.push_back(codec.encode(r[static_cast<std::size_t>(req.view_id)]));
  g.validate();
  return gmm_denoise(req, g, s);
}

}  // namespace mvd
