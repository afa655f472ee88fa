#include "vtcd/diffusion.hpp"

#include <cmath>
#include <string>

#include "vtcd/error.hpp"

namespace vtcd {

namespace {

void require_same(const Tensor& a, const Tensor& b, const char* what) {
  if (!a.same_shape(b))
    throw DimensionError(std::string(what) + ": shape mismatch (" + std::to_string(a.c) + "," +
                         std::to_string(a.h) + "," + std::to_string(a.w) + ") vs (" + std::to_string(b.c) +
                         "," + std::to_string(b.h) + "," + std::to_string(b.w) + ")");
}

void require_step(const NoiseSchedule& sched, int t, int lo) {
  if (t < lo || t > sched.T)
    throw ValidationError("step " + std::to_string(t) + " outside [" + std::to_string(lo) + "," +
                          std::to_string(sched.T) + "]");
}

}  // namespace

NoiseSchedule make_linear_schedule(int T, double beta_start, double beta_end) {
  if (T < 1) throw ValidationError("schedule needs T >= 1");
  if (!(beta_start > 0.0) || !(beta_end >= beta_start) || !(beta_end < 1.0))
    throw ValidationError("schedule needs 0 < beta_start <= beta_end < 1");
  NoiseSchedule s;
  s.T = T;
  s.betas.assign(T + 1, 0.0);
  s.alphas_bar.assign(T + 1, 1.0);
  s.sigmas.assign(T + 1, 0.0);
  for (int t = 1; t <= T; ++t) {
    s.betas[t] = T == 1 ? beta_start : beta_start + (beta_end - beta_start) * (t - 1) / static_cast<double>(T - 1);
    s.alphas_bar[t] = s.alphas_bar[t - 1] * (1.0 - s.betas[t]);
    s.sigmas[t] = t == 1 ? 0.0 : std::sqrt(s.betas[t]);
  }
  return s;
}

NoiseSchedule NoiseSchedule::with_noise_scale(double eta) const {
  NoiseSchedule s = *this;
  for (double& v : s.sigmas) v *= eta;
  return s;
}

double NoiseSchedule::noise_to_signal(int t) const {
  return std::sqrt((1.0 - alphas_bar[t]) / alphas_bar[t]);
}

Tensor q_sample(const Tensor& x0, int t, const Tensor& eps, const NoiseSchedule& sched) {
  require_same(x0, eps, "q_sample");
  require_step(sched, t, 0);
  const double a = std::sqrt(sched.alphas_bar[t]);
  const double b = std::sqrt(1.0 - sched.alphas_bar[t]);
  Tensor out(x0.c, x0.h, x0.w);
  for (std::size_t i = 0; i < out.v.size(); ++i) out.v[i] = a * x0.v[i] + b * eps.v[i];
  return out;
}

Tensor reverse_step(const Tensor& x_t, const Tensor& eps_pred, int t, const NoiseSchedule& sched, const Tensor& z) {
  require_same(x_t, eps_pred, "reverse_step");
  require_same(x_t, z, "reverse_step");
  require_step(sched, t, 1);
  const double beta = sched.betas[t];
  const double inv = 1.0 / std::sqrt(1.0 - beta);
  const double k = beta / std::sqrt(1.0 - sched.alphas_bar[t]);
  const double sigma = sched.sigmas[t];
  Tensor out(x_t.c, x_t.h, x_t.w);
  for (std::size_t i = 0; i < out.v.size(); ++i)
    out.v[i] = (x_t.v[i] - k * eps_pred.v[i]) * inv + sigma * z.v[i];
  return out;
}

Tensor draw_noise(const Tensor& like, Rng& rng) {
  Tensor z(like.c, like.h, like.w);
  for (double& v : z.v) v = rng.normal();
  return z;
}

Tensor full_reverse(const Tensor& x_T, const NoisePredictor& predictor, const NoiseSchedule& sched,
                    std::uint64_t seed) {
  Rng rng(seed);
  Tensor x = x_T;
  for (int t = sched.T; t >= 1; --t) {
    Tensor eps = predictor(x, t);
    if (!eps.same_shape(x))
      throw ContractError("noise predictor returned shape (" + std::to_string(eps.c) + "," + std::to_string(eps.h) +
                          "," + std::to_string(eps.w) + ") at t=" + std::to_string(t));
    const Tensor z = draw_noise(x, rng);
    x = reverse_step(x, eps, t, sched, z);
  }
  return x;
}

std::pair<Tensor, double> forward_bridge(const Tensor& x0, const Tensor& x_s, int t, int s,
                                         const NoiseSchedule& sched) {
  require_same(x0, x_s, "forward_bridge");
  if (t < 0 || t > s || s > sched.T) throw ValidationError("forward_bridge needs 0 <= t <= s <= T");
  Tensor mean(x0.c, x0.h, x0.w);
  if (t == s) {
    mean = x_s;
    return {mean, 0.0};
  }
  const double abt = sched.alphas_bar[t], abs_ = sched.alphas_bar[s];
  const double a = abs_ / abt;
  const double denom = 1.0 - abs_;
  const double c0 = std::sqrt(abt) * (1.0 - a) / denom;
  const double cs = std::sqrt(a) * (1.0 - abt) / denom;
  for (std::size_t i = 0; i < mean.v.size(); ++i) mean.v[i] = c0 * x0.v[i] + cs * x_s.v[i];
  const double var = (1.0 - abt) * (1.0 - a) / denom;
  return {mean, std::max(0.0, var)};
}

}  // namespace vtcd
