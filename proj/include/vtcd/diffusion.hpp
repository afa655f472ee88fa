#pragma once

#include <cstdint>
#include <functional>
#include <optional>
#include <vector>

#include "vtcd/rng.hpp"
#include "vtcd/tensor.hpp"

namespace vtcd {

/// Per-step coefficients indexed by t in [0, T]; entry 0 holds the t=0 convention
/// (beta 0, alpha_bar 1, sigma 0).
struct NoiseSchedule {
  int T = 0;
  std::vector<double> betas;
  std::vector<double> alphas_bar;
  std::vector<double> sigmas;

  /// Same betas with every reverse-noise scale multiplied by `eta` (0 gives the
  /// noise-free mean path).
  NoiseSchedule with_noise_scale(double eta) const;
  /// sqrt((1 - alpha_bar_t) / alpha_bar_t): noise std of x_t / sqrt(alpha_bar_t).
  double noise_to_signal(int t) const;
};

struct DiffusionState {
  Tensor x;
  int t = 0;
  std::optional<Tensor> z;
};

NoiseSchedule make_linear_schedule(int T, double beta_start, double beta_end);

Tensor q_sample(const Tensor& x0, int t, const Tensor& eps, const NoiseSchedule& sched);

Tensor reverse_step(const Tensor& x_t, const Tensor& eps_pred, int t, const NoiseSchedule& sched, const Tensor& z);

/// Standard normal field with the shape of `like`.
Tensor draw_noise(const Tensor& like, Rng& rng);

using NoisePredictor = std::function<Tensor(const Tensor& x_t, int t)>;

/// Runs reverse steps T..1. A fresh z is drawn at every step so that chains with
/// identical seeds consume identical noise regardless of sigma.
Tensor full_reverse(const Tensor& x_T, const NoisePredictor& predictor, const NoiseSchedule& sched,
                    std::uint64_t seed);

/// Exact posterior of x_t given x0 and a later x_s (t < s) under the forward chain:
/// returns (mean, variance) as a field and scalar.
std::pair<Tensor, double> forward_bridge(const Tensor& x0, const Tensor& x_s, int t, int s,
                                         const NoiseSchedule& sched);

}  // namespace vtcd
