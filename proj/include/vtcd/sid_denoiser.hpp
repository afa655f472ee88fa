#pragma once

#include <cstdint>
#include <optional>
#include <span>
#include <vector>

#include "json.hpp"
#include "vtcd/diffusion.hpp"
#include "vtcd/nn.hpp"
#include "vtcd/volume.hpp"

namespace vtcd {

struct Hyperplane {
  std::vector<double> n;
  double fit_accuracy = 0.0;
  /// +1 if the classifier weights already pointed towards the low-noise class, -1 if flipped.
  int orientation = 1;
};

struct EditConfig {
  double lambda = 0.0;
  int t_lo = 1;
  int t_hi = 1 << 30;

  void validate() const;
  bool active_at(int t) const { return lambda != 0.0 && t >= t_lo && t <= t_hi; }
};

/// Logistic regression (ridge-regularised, with intercept) separating the two
/// classes; n is the unit weight vector oriented towards the low-noise class.
Hyperplane fit_hyperplane(const std::vector<std::vector<double>>& low_noise,
                          const std::vector<std::vector<double>>& high_noise);

double semantic_distance(std::span<const double> x, const Hyperplane& h);

/// x + lambda * d(x, n) * n
std::vector<double> edit_latent(std::span<const double> x, const Hyperplane& h, const EditConfig& cfg);

struct DenoiserWidths {
  int c1 = 12;
  int c2 = 24;
  int temb = 16;
};

/// Conditioning of one slice: its own noisy content and the refined slice above it.
struct SliceCondition {
  Tensor slice;
  Tensor previous;
};

/// Small U-shaped noise predictor. Input channels: x_t / sqrt(abar_t), the condition
/// slice and the previous refined slice; a sinusoidal step embedding modulates two
/// stages. The network emits N, the noise expressed at x0 scale, so that
/// eps = N / sqrt((1 - abar_t) / abar_t) and x0_hat = x_t / sqrt(abar_t) - N.
class DenoiserModel {
 public:
  struct Nodes {
    nn::Graph::Id noise;   ///< N
    nn::Graph::Id latent;  ///< bottleneck features after any edit
    std::vector<double> pooled;  ///< spatial mean of the bottleneck before editing
  };

  DenoiserModel() : DenoiserModel(DenoiserWidths{}, 0) {}
  DenoiserModel(DenoiserWidths widths, std::uint64_t seed);

  const DenoiserWidths& widths() const { return widths_; }
  std::vector<nn::Param*> params();
  std::vector<const nn::Param*> params() const;
  int latent_dim() const { return widths_.c2; }

  /// Builds the forward pass. With `track` false parameters enter as constants.
  /// `edit` (when given and active at t) moves every bottleneck vector by
  /// lambda * d(pooled, n) * n.
  Nodes forward(nn::Graph& g, nn::Graph::Id x_scaled, nn::Graph::Id cond, nn::Graph::Id prev, int t, bool track,
                const Hyperplane* h = nullptr, const EditConfig* edit = nullptr);

  /// eps prediction for x_t at step t >= 1.
  Tensor predict_eps(const Tensor& x_t, int t, const SliceCondition& cond, const NoiseSchedule& sched,
                     const Hyperplane* h = nullptr, const EditConfig* edit = nullptr);
  /// Pooled bottleneck latent (unedited) used for hyperplane fitting.
  std::vector<double> pooled_latent(const Tensor& x_t, int t, const SliceCondition& cond, const NoiseSchedule& sched);

 private:
  nn::Graph::Id p(nn::Graph& g, nn::Param& prm, bool track) { return track ? g.param(prm) : g.frozen(prm); }

  DenoiserWidths widths_;
  nn::Param w_in_, b_in_, w_f1_, b_f1_, w_e2_, b_e2_, w_m1_, b_m1_, w_f2_, b_f2_, w_m2_, b_m2_, w_d1_, b_d1_, w_out_;
};

Tensor step_embedding(int t, int dim);

DiffusionState guided_reverse_step(const DiffusionState& state, const SliceCondition& cond, DenoiserModel& model,
                                   const Hyperplane* h, const EditConfig& cfg, const NoiseSchedule& sched,
                                   const Tensor& z);

/// Runs guided steps t_start..1 drawing one noise field per step from `rng`.
Tensor guided_reverse_chain(const Tensor& x_start, int t_start, const SliceCondition& cond, DenoiserModel& model,
                            const Hyperplane* h, const EditConfig& cfg, const NoiseSchedule& sched, Rng& rng);

/// Slices are refined in order z = 0..C-1; slice z starts at sqrt(abar_t(z)) * y_z and
/// conditions on itself and the refined slice z-1. Slices with t(z) = 0 pass through.
Volume3D denoise_volume(const Volume3D& vol, DenoiserModel& model, const Hyperplane* h, const EditConfig& cfg,
                        const NoiseSchedule& sched, std::uint64_t seed);

/// Pooled latents of first-quartile (low) and last-quartile (high) XY slices.
std::pair<std::vector<std::vector<double>>, std::vector<std::vector<double>>> collect_latents(
    DenoiserModel& model, const std::vector<Volume3D>& volumes, const NoiseSchedule& sched);

nlohmann::json to_json(const Hyperplane& h);
Hyperplane hyperplane_from_json(const nlohmann::json& j);

}  // namespace vtcd
