#include <cmath>
#include <random>

#include "doctest.h"
#include "test_util.hpp"
#include "vtcd/diffusion.hpp"
#include "vtcd/error.hpp"

using namespace vtcd;

namespace {

double max_abs_diff(const Tensor& a, const Tensor& b) {
  double m = 0.0;
  for (std::size_t i = 0; i < a.v.size(); ++i) m = std::max(m, std::abs(a.v[i] - b.v[i]));
  return m;
}

Tensor filled(int h, int w, double v) { return Tensor::field(h, w, v); }

}  // namespace

TEST_SUITE("diffusion") {

TEST_CASE("single-step schedule") {
  const auto s = make_linear_schedule(1, 0.1, 0.1);
  REQUIRE(s.alphas_bar.size() == 2);
  CHECK(s.alphas_bar[0] == 1.0);
  CHECK(s.alphas_bar[1] == doctest::Approx(0.9).epsilon(1e-15));
  CHECK(s.sigmas[1] == 0.0);
}

TEST_CASE("zero beta is rejected") {
  CHECK_THROWS_AS(make_linear_schedule(3, 0.0, 0.0), ValidationError);
  CHECK_THROWS_AS(make_linear_schedule(0, 0.1, 0.1), ValidationError);
  CHECK_THROWS_AS(make_linear_schedule(3, 0.2, 0.1), ValidationError);
  CHECK_THROWS_AS(make_linear_schedule(3, 0.1, 1.0), ValidationError);
}

TEST_CASE("constant beta 0.1 over four steps") {
  const auto s = make_linear_schedule(4, 0.1, 0.1);
  double prod = 1.0;
  const double expect[4] = {0.9, 0.81, 0.729, 0.6561};
  for (int t = 1; t <= 4; ++t) {
    prod *= 0.9;
    CHECK(s.alphas_bar[t] == doctest::Approx(prod).epsilon(1e-14));
    CHECK(s.alphas_bar[t] == doctest::Approx(expect[t - 1]).epsilon(1e-12));
  }
}

TEST_CASE("linear spacing, monotone alpha_bar and fixed-variance sigmas") {
  const auto s = make_linear_schedule(16, 2e-4, 1e-3);
  CHECK(s.betas[1] == 2e-4);
  CHECK(s.betas[16] == doctest::Approx(1e-3).epsilon(1e-14));
  for (int t = 1; t <= 16; ++t) {
    CHECK(s.alphas_bar[t] < s.alphas_bar[t - 1]);
    if (t > 1) CHECK(s.sigmas[t] == doctest::Approx(std::sqrt(s.betas[t])));
    const double a = std::sqrt(s.alphas_bar[t]);
    CHECK(a * a + (1.0 - s.alphas_bar[t]) == doctest::Approx(1.0).epsilon(1e-15));
    CHECK(s.noise_to_signal(t) == doctest::Approx(std::sqrt((1 - s.alphas_bar[t]) / s.alphas_bar[t])));
  }
  CHECK(s.sigmas[1] == 0.0);
  const auto z = s.with_noise_scale(0.0);
  for (double v : z.sigmas) CHECK(v == 0.0);
  CHECK(z.alphas_bar == s.alphas_bar);
}

TEST_CASE("q_sample at t=0 returns x0 exactly") {
  const auto s = make_linear_schedule(4, 0.1, 0.2);
  const Tensor x0 = test::random_tensor(1, 4, 4, 1);
  const Tensor eps = test::random_tensor(1, 4, 4, 2);
  CHECK(q_sample(x0, 0, eps, s).v == x0.v);
}

TEST_CASE("q_sample closed form at alpha_bar 0.25") {
  // beta = 0.75 gives alpha_bar_1 = 0.25
  const auto s = make_linear_schedule(1, 0.75, 0.75);
  const Tensor out = q_sample(filled(3, 3, 0.5), 1, filled(3, 3, 1.0), s);
  for (double v : out.v) CHECK(v == doctest::Approx(0.25 + std::sqrt(0.75)).epsilon(1e-14));
  CHECK(out.v[0] == doctest::Approx(1.116025).epsilon(1e-6));
}

TEST_CASE("q_sample shape mismatch is a dimension error") {
  const auto s = make_linear_schedule(2, 0.1, 0.1);
  CHECK_THROWS_AS(q_sample(filled(2, 2, 0), 1, filled(2, 3, 0), s), DimensionError);
}

TEST_CASE("q_sample moments over many draws") {
  const auto s = make_linear_schedule(8, 0.01, 0.05);
  const int t = 6;
  const double x0 = 0.7;
  const int n = 100000;
  Rng rng(123);
  Tensor eps(1, 1, n);
  for (double& v : eps.v) v = rng.normal();
  const Tensor xt = q_sample(filled(1, n, x0), t, eps, s);
  double m = 0.0;
  for (double v : xt.v) m += v;
  m /= n;
  double var = 0.0;
  for (double v : xt.v) var += (v - m) * (v - m);
  var /= (n - 1);
  const double mu = std::sqrt(s.alphas_bar[t]) * x0, sig2 = 1.0 - s.alphas_bar[t];
  CHECK(std::abs(m - mu) < 4.0 * std::sqrt(sig2 / n));
  // std error of the sample variance of a Gaussian: sig2 * sqrt(2 / (n - 1))
  CHECK(std::abs(var - sig2) < 4.0 * sig2 * std::sqrt(2.0 / (n - 1)));
}

TEST_CASE("reverse step with vanishing beta leaves x_t unchanged") {
  const auto s = make_linear_schedule(3, 1e-12, 1e-12);
  const Tensor x = test::random_tensor(1, 3, 3, 4);
  const Tensor e = test::random_tensor(1, 3, 3, 5);
  const Tensor out = reverse_step(x, e, 2, s.with_noise_scale(0.0), Tensor(1, 3, 3));
  CHECK(max_abs_diff(out, x) < 1e-5);
}

TEST_CASE("scalar reverse step") {
  const auto s = make_linear_schedule(1, 0.1, 0.1);
  const Tensor out = reverse_step(filled(1, 1, 1.0), filled(1, 1, 0.5), 1, s, filled(1, 1, 0.0));
  const double hand = (1.0 - 0.1 / std::sqrt(0.1) * 0.5) / std::sqrt(0.9);
  CHECK(out.v[0] == doctest::Approx(hand).epsilon(1e-14));
  CHECK(out.v[0] == doctest::Approx(0.8874).epsilon(1e-4));
}

TEST_CASE("one-step algebraic inversion") {
  const auto s = make_linear_schedule(1, 0.05, 0.05);
  const Tensor xprev = test::random_tensor(1, 4, 4, 8);
  Rng rng(3);
  const Tensor eps = draw_noise(xprev, rng);
  const double b = s.betas[1];
  Tensor xt(1, 4, 4);
  for (std::size_t i = 0; i < xt.v.size(); ++i) xt.v[i] = std::sqrt(1 - b) * xprev.v[i] + std::sqrt(b) * eps.v[i];
  // eps_pred consistent with the reverse mean: k * eps_pred = sqrt(b) * eps with k = b / sqrt(1 - abar)
  Tensor pred(1, 4, 4);
  for (std::size_t i = 0; i < pred.v.size(); ++i)
    pred.v[i] = std::sqrt(b) * eps.v[i] * std::sqrt(1 - s.alphas_bar[1]) / b;
  const Tensor back = reverse_step(xt, pred, 1, s, Tensor(1, 4, 4));
  CHECK(max_abs_diff(back, xprev) < 1e-6);
}

TEST_CASE("reverse step is affine with the stated coefficients") {
  const auto s = make_linear_schedule(5, 0.02, 0.08);
  const int t = 3;
  const double bt = s.betas[t];
  const Tensor one = filled(1, 1, 1.0), zero = filled(1, 1, 0.0);
  CHECK(reverse_step(one, zero, t, s, zero).v[0] == doctest::Approx(1.0 / std::sqrt(1 - bt)).epsilon(1e-14));
  CHECK(reverse_step(zero, one, t, s, zero).v[0] ==
        doctest::Approx(-bt / (std::sqrt(1 - s.alphas_bar[t]) * std::sqrt(1 - bt))).epsilon(1e-13));
  CHECK(reverse_step(zero, zero, t, s, one).v[0] == doctest::Approx(s.sigmas[t]).epsilon(1e-14));
  CHECK(reverse_step(zero, zero, t, s, zero).v[0] == 0.0);
}

TEST_CASE("reverse step rejects mismatched shapes and t = 0") {
  const auto s = make_linear_schedule(2, 0.1, 0.1);
  CHECK_THROWS_AS(reverse_step(filled(2, 2, 0), filled(2, 2, 0), 1, s, filled(3, 2, 0)), DimensionError);
  CHECK_THROWS_AS(reverse_step(filled(2, 2, 0), filled(2, 2, 0), 0, s, filled(2, 2, 0)), ValidationError);
}

// The oracle predictor returns, at every step, the noise that maps x_t back onto the
// forward trajectory of x0 under the reverse mean.
NoisePredictor oracle_for(const Tensor& x0, const NoiseSchedule& s) {
  return [x0, s](const Tensor& xt, int t) {
    Tensor eps(xt.c, xt.h, xt.w);
    const double a = std::sqrt(s.alphas_bar[t]);
    const double b = std::sqrt(1.0 - s.alphas_bar[t]);
    for (std::size_t i = 0; i < eps.v.size(); ++i) eps.v[i] = (xt.v[i] - a * x0.v[i]) / b;
    return eps;
  };
}

TEST_CASE("oracle round trip with T=1 is an exact single-step inversion") {
  const auto s = make_linear_schedule(1, 0.1, 0.1).with_noise_scale(0.0);
  const Tensor x0 = test::random_tensor(1, 4, 4, 1);
  Rng rng(2);
  const Tensor xT = q_sample(x0, 1, draw_noise(x0, rng), s);
  CHECK(max_abs_diff(full_reverse(xT, oracle_for(x0, s), s, 0), x0) < 1e-12);
}

TEST_CASE("oracle round trip for T=10 on 8x8") {
  const auto s = make_linear_schedule(10, 1e-4, 0.02).with_noise_scale(0.0);
  const Tensor x0 = test::random_tensor(1, 8, 8, 31);
  Rng rng(5);
  const Tensor eps = draw_noise(x0, rng);
  const Tensor xT = q_sample(x0, 10, eps, s);
  CHECK(max_abs_diff(full_reverse(xT, oracle_for(x0, s), s, 17), x0) < 1e-5);
}

TEST_CASE("oracle round trip holds up to T=16") {
  for (int T : {2, 5, 16}) {
    const auto s = make_linear_schedule(T, 2e-4, 1e-3).with_noise_scale(0.0);
    const Tensor x0 = test::random_tensor(1, 6, 6, 40 + T);
    Rng rng(T);
    const Tensor xT = q_sample(x0, T, draw_noise(x0, rng), s);
    CHECK(max_abs_diff(full_reverse(xT, oracle_for(x0, s), s, 1), x0) < 1e-5);
  }
}

TEST_CASE("zero predictor divides by the product of sqrt(1 - beta)") {
  const auto s = make_linear_schedule(6, 1e-3, 2e-3).with_noise_scale(0.0);
  const Tensor xT = test::random_tensor(1, 3, 3, 9);
  const Tensor out = full_reverse(xT, [](const Tensor& x, int) { return Tensor(x.c, x.h, x.w); }, s, 0);
  double prod = 1.0;
  for (int t = 1; t <= 6; ++t) prod *= std::sqrt(1.0 - s.betas[t]);
  for (std::size_t i = 0; i < out.v.size(); ++i) CHECK(out.v[i] == doctest::Approx(xT.v[i] / prod).epsilon(1e-13));
}

TEST_CASE("predictor returning the wrong shape breaks the contract") {
  const auto s = make_linear_schedule(3, 0.01, 0.02);
  CHECK_THROWS_AS(full_reverse(filled(4, 4, 0), [](const Tensor&, int) { return Tensor(1, 2, 2); }, s, 0),
                  ContractError);
}

TEST_CASE("full_reverse is deterministic per seed and uses the seed when sigma > 0") {
  const auto s = make_linear_schedule(4, 0.01, 0.05);
  const Tensor xT = test::random_tensor(1, 4, 4, 9);
  auto zero = [](const Tensor& x, int) { return Tensor(x.c, x.h, x.w); };
  CHECK(full_reverse(xT, zero, s, 3).v == full_reverse(xT, zero, s, 3).v);
  CHECK(full_reverse(xT, zero, s, 3).v != full_reverse(xT, zero, s, 4).v);
}

TEST_CASE("forward bridge agrees with the two-sided Gaussian posterior") {
  const auto s = make_linear_schedule(8, 0.01, 0.05);
  const Tensor x0 = filled(1, 1, 0.4), xs = filled(1, 1, 0.9);
  const int t = 3, k = 7;
  auto [mean, var] = forward_bridge(x0, xs, t, k, s);
  // Joint of (x_t, x_k) given x0: x_t ~ N(a_t x0, 1 - A_t); x_k = r x_t + n, r^2 = A_k / A_t, n ~ N(0, 1 - A_k/A_t).
  const double At = s.alphas_bar[t], Ak = s.alphas_bar[k];
  const double r = std::sqrt(Ak / At), vt = 1.0 - At, vn = 1.0 - Ak / At;
  const double post_var = 1.0 / (1.0 / vt + r * r / vn);
  const double post_mean = post_var * (std::sqrt(At) * 0.4 / vt + r * 0.9 / vn);
  CHECK(mean.v[0] == doctest::Approx(post_mean).epsilon(1e-12));
  CHECK(var == doctest::Approx(post_var).epsilon(1e-12));
  auto [same, zero] = forward_bridge(x0, xs, k, k, s);
  CHECK(same.v[0] == 0.9);
  CHECK(zero == 0.0);
}

}  // TEST_SUITE
