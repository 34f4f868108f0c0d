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

#include <Eigen/Core>
#include <map>
#include <memory>
#include <optional>
#include <string>
#include <vector>

#include "mvd/core.hpp"
#include "mvd/schedule.hpp"

namespace mvd {

class Codec;

/// Key/value rows a denoiser exports from its attention layer so that other
/// views can attend to them.
struct AttentionFeatures {
  Eigen::MatrixXd keys;    // r x c
  Eigen::MatrixXd values;  // r x c
};

struct DenoiserRequest {
  int view_id = 0;
  int timestep = 0;
  LatentField latent;
  std::map<std::string, LatentField> conditions;
  std::optional<std::string> prompt;
  std::optional<AttentionFeatures> reference_features;
};

struct DenoiserResponse {
  LatentField eps;
  std::optional<AttentionFeatures> features;
};

enum class Concurrency { concurrent_safe, serial_only };

/// Anything that can predict eps for a latent at a timestep.
class Denoiser {
 public:
  virtual ~Denoiser() = default;
  virtual DenoiserResponse denoise(const DenoiserRequest& req) = 0;
  virtual Concurrency concurrency() const { return Concurrency::concurrent_safe; }
};

/// eps whose predicted original is exactly `target`.
DenoiserResponse oracle_denoise(const DenoiserRequest& req, const LatentField& target,
                                const Schedule& s);

struct GaussianMixtureModel {
  std::vector<LatentField> components;
  std::vector<double> weights;

  /// Throws ConfigError unless weights are positive, sum to 1 (1e-9) and all
  /// components share one shape.
  void validate() const;
};

struct GmmPosterior {
  std::vector<double> log_responsibilities;
  std::vector<double> responsibilities;
  LatentField mean;
};

/// Posterior over components given x_t, computed in the log domain.
/// Throws NumericalError naming the timestep when nothing survives.
GmmPosterior gmm_posterior(const LatentField& x_t, const GaussianMixtureModel& gmm, int t,
                           const Schedule& s);

/// Posterior-mean denoiser. When the request carries reference features
/// (log-responsibility keys exported by another view) the responsibilities
/// are taken from an extended attention over own and reference keys.
/// The response always exports this view's own log-responsibilities.
DenoiserResponse gmm_denoise(const DenoiserRequest& req, const GaussianMixtureModel& gmm,
                             const Schedule& s);

/// Softmax(Q [K_ref; K]^T / sqrt(c)) as an n x (r + m) matrix.
Eigen::MatrixXd extended_attention_weights(const Eigen::MatrixXd& q, const Eigen::MatrixXd& k,
                                           const Eigen::MatrixXd& k_ref);

/// Softmax(Q [K_ref; K]^T / sqrt(c)) [V_ref; V]. With zero reference rows this
/// is plain scaled dot-product attention.
Eigen::MatrixXd extended_attention(const Eigen::MatrixXd& q, const Eigen::MatrixXd& k,
                                   const Eigen::MatrixXd& v, const Eigen::MatrixXd& k_ref,
                                   const Eigen::MatrixXd& v_ref);

class OracleDenoiser final : public Denoiser {
 public:
  OracleDenoiser(std::vector<LatentField> targets_per_view, Schedule s)
      : targets_(std::move(targets_per_view)), schedule_(std::move(s)) {}
  /// Same target for every view.
  OracleDenoiser(LatentField target, Schedule s) : targets_{std::move(target)}, schedule_(std::move(s)) {}

  DenoiserResponse denoise(const DenoiserRequest& req) override;

 private:
  std::vector<LatentField> targets_;
  Schedule schedule_;
};

class GmmDenoiser final : public Denoiser {
 public:
  GmmDenoiser(GaussianMixtureModel gmm, Schedule s);
  DenoiserResponse denoise(const DenoiserRequest& req) override;
  const GaussianMixtureModel& model() const noexcept { return gmm_; }

 private:
  GaussianMixtureModel gmm_;
  Schedule schedule_;
};

/// Per-view oracle over several texture variants of the same geometry:
/// view v is denoised by a GMM whose components are encode(render[k][v]).
class MeshOracleDenoiser final : public Denoiser {
 public:
  /// renders[k][v] is the image of texture variant k seen from view v.
  MeshOracleDenoiser(const std::vector<std::vector<LatentField>>& renders,
                     std::vector<double> variant_weights, const Codec& codec, Schedule s);

  DenoiserResponse denoise(const DenoiserRequest& req) override;
  const GaussianMixtureModel& view_model(int view_id) const;
  int num_views() const noexcept { return static_cast<int>(per_view_.size()); }

 private:
  std::vector<GaussianMixtureModel> per_view_;
  Schedule schedule_;
};

DenoiserResponse mesh_oracle_denoise(const DenoiserRequest& req,
                                     const std::vector<std::vector<LatentField>>& renders,
                                     std::vector<double> variant_weights, const Codec& codec,
                                     const Schedule& s);

}  // namespace mvd
