#include <cmath>
#include <random>
#include <vector>

#include "checks.hpp"
#include "doctest.h"
#include "test_util.hpp"
#include "vtcd/cpgp_srm.hpp"
#include "vtcd/error.hpp"
#include "vtcd/losses.hpp"

using namespace vtcd;

namespace {

std::vector<double> filled(std::size_t n, double v) { return std::vector<double>(n, v); }

Tensor field(int h, int w, double v) { return Tensor::field(h, w, v); }

double brute_mean_abs(const Tensor& a, const Tensor& b) {
  double s = 0.0;
  for (std::size_t i = 0; i < a.v.size(); ++i) s += std::abs(a.v[i] - b.v[i]);
  return s / static_cast<double>(a.v.size());
}

}  // namespace

TEST_SUITE("losses") {

TEST_CASE("least-squares critic objective") {
  CHECK(adversarial_d(filled(9, 1.0), filled(9, 0.0)) == 0.0);
  CHECK(adversarial_d(filled(9, 0.0), filled(9, 1.0)) == 2.0);
  CHECK(adversarial_d(filled(9, 0.5), filled(4, 0.5)) == 0.5);
}

TEST_CASE("least-squares generator objective") {
  CHECK(adversarial_g(filled(5, 1.0)) == 0.0);
  CHECK(adversarial_g(filled(5, 0.0)) == 1.0);
  CHECK(adversarial_g(filled(1, 0.5)) == 0.25);
  CHECK(adversarial_g(filled(36, 0.5)) == 0.25);
}

TEST_CASE("cycle consistency") {
  const Tensor a = test::random_tensor(1, 4, 4, 1), b = test::random_tensor(1, 4, 4, 2);
  CHECK(cycle_consistency(a, a) == 0.0);
  CHECK(cycle_consistency(field(3, 3, 0.2), field(3, 3, 0.5)) == doctest::Approx(0.3).epsilon(1e-15));
  CHECK(cycle_consistency(a, b) == doctest::Approx(brute_mean_abs(a, b)).epsilon(1e-15));
  CHECK_THROWS_AS(cycle_consistency(a, field(4, 3, 0)), DimensionError);
}

TEST_CASE("identity loss") {
  const Tensor a = test::random_tensor(1, 4, 4, 3), b = test::random_tensor(1, 4, 4, 4);
  CHECK(identity_loss(a, a) == 0.0);
  Tensor shifted = a;
  for (double& v : shifted.v) v += 0.1;
  CHECK(identity_loss(a, shifted) == doctest::Approx(0.1).epsilon(1e-12));
  CHECK(identity_loss(a, b) == doctest::Approx(brute_mean_abs(a, b)).epsilon(1e-15));
}

TEST_CASE("total variation") {
  CHECK(tv_loss(Tensor(3, 5, 4, 0.7)) == 0.0);
  Tensor t(1, 2, 2);
  t.at(0, 0, 1) = 1.0;
  t.at(0, 1, 1) = 1.0;
  // one interior term sqrt(1 + 0) over h*w*c = 4
  CHECK(tv_loss(t) == 0.25);
  const Tensor r = test::random_tensor(2, 5, 6, 9);
  Tensor r2 = r;
  for (double& v : r2.v) v *= 2.0;
  CHECK(tv_loss(r2) == doctest::Approx(2.0 * tv_loss(r)).epsilon(1e-14));
  CHECK_THROWS_AS(tv_loss(Tensor(1, 1, 4)), DimensionError);
}

TEST_CASE("total variation against a brute-force sum") {
  const Tensor r = test::random_tensor(3, 4, 5, 10);
  double s = 0.0;
  for (int k = 0; k < 3; ++k)
    for (int i = 0; i + 1 < 4; ++i)
      for (int j = 0; j + 1 < 5; ++j) {
        const double dj = r.at(k, i, j + 1) - r.at(k, i, j), di = r.at(k, i + 1, j) - r.at(k, i, j);
        s += std::sqrt(dj * dj + di * di);
      }
  CHECK(tv_loss(r) == doctest::Approx(s / 60.0).epsilon(1e-14));
}

TEST_CASE("content loss") {
  const IdentityFeatureMap id;
  const Tensor a = test::random_tensor(1, 4, 4, 5), b = test::random_tensor(1, 4, 4, 6);
  CHECK(content_loss(a, a, id) == 0.0);
  CHECK(content_loss(field(2, 2, 1.0), field(2, 2, 0.0), id) == doctest::Approx(0.5).epsilon(1e-15));
  CHECK(content_loss(a, b, id) == content_loss(b, a, id));
  SrmModel srm;
  const EncoderFeatureMap enc(srm);
  CHECK(content_loss(a, b, enc) == doctest::Approx(content_loss(b, a, enc)).epsilon(1e-14));
  CHECK(content_loss(a, a, enc) == 0.0);
}

TEST_CASE("diffusion loss") {
  const Tensor a = test::random_tensor(1, 4, 4, 7), b = test::random_tensor(1, 4, 4, 8);
  CHECK(diffusion_loss(a, a) == 0.0);
  CHECK(diffusion_loss(field(3, 3, 0.0), field(3, 3, 1.0)) == 1.0);
  double s = 0.0;
  for (std::size_t i = 0; i < a.v.size(); ++i) s += (a.v[i] - b.v[i]) * (a.v[i] - b.v[i]);
  CHECK(diffusion_loss(a, b) == doctest::Approx(s / 16.0).epsilon(1e-15));
}

TEST_CASE("losses are non-negative on random inputs") {
  std::mt19937_64 eng(3);
  for (int i = 0; i < 20; ++i) {
    const Tensor a = test::random_tensor(1, 4, 4, 100 + i, -2, 2), b = test::random_tensor(1, 4, 4, 200 + i, -2, 2);
    CHECK(adversarial_d(a.v, b.v) >= 0.0);
    CHECK(adversarial_g(a.v) >= 0.0);
    CHECK(cycle_consistency(a, b) >= 0.0);
    CHECK(tv_loss(a) >= 0.0);
    CHECK(diffusion_loss(a, b) >= 0.0);
  }
}

TEST_CASE("weighted total: zero parts, zero weights, unit parts") {
  LossWeights w;
  LossBreakdown zero;
  CHECK(total_loss(zero, w, Phase::Joint).total == 0.0);
  LossBreakdown ones{1, 1, 1, 1, 1, 1, 1, 0};
  LossWeights none{0, 0, 0, 0, 0, 0, {}};
  CHECK(total_loss(ones, none, Phase::Joint).total == 0.0);
  LossWeights unit{1, 1, 1, 1, 1, 1, {}};
  // adversarial group (both sides) + denoise cycle group (diff + tv) + SR cycle group (cyc + content) + identity
  const double hand = (1.0 + 1.0) + (1.0 + 1.0) + (1.0 + 1.0) + 1.0;
  const LossBreakdown t = total_loss(ones, unit, Phase::Denoise);
  CHECK(t.total == hand);
  CHECK(t.cyc == 1.0);
  CHECK(t.adv_d == 1.0);
}

TEST_CASE("weighted total is linear in each weight") {
  const LossBreakdown p{0.3, 0.7, 0.11, 0.05, 0.9, 0.02, 0.4, 0};
  LossWeights w;
  const double base = total_loss(p, w, Phase::Sr).total;
  LossWeights w2 = w;
  w2.w_cyc *= 2.0;
  CHECK(total_loss(p, w2, Phase::Sr).total - base == doctest::Approx(w.w_cyc * p.cyc).epsilon(1e-14));
  LossWeights w3 = w;
  w3.w_tv *= 2.0;
  CHECK(total_loss(p, w3, Phase::Sr).total - base == doctest::Approx(w.w_tv * p.tv).epsilon(1e-12));
}

TEST_CASE("phase overrides replace base weights") {
  LossWeights w;
  w.phase_schedule[Phase::Joint].w_cyc = 2.0;
  w.phase_schedule[Phase::Joint].w_adv = 0.0;
  const LossWeights a = w.active(Phase::Joint);
  CHECK(a.w_cyc == 2.0);
  CHECK(a.w_adv == 0.0);
  CHECK(a.w_tv == w.w_tv);
  CHECK(a.phase_schedule.empty());
  CHECK(w.active(Phase::Sr).w_cyc == 10.0);
  const LossBreakdown p{1, 1, 1, 0, 0, 0, 0, 0};
  CHECK(total_loss(p, w, Phase::Joint).total == 2.0);
}

TEST_CASE("default weights and validation") {
  LossWeights w;
  CHECK(w.w_adv == 1.0);
  CHECK(w.w_cyc == 10.0);
  CHECK(w.w_id == 5.0);
  CHECK(w.w_tv == 0.1);
  CHECK(w.w_content == 1.0);
  CHECK(w.w_diff == 1.0);
  w.w_tv = -1.0;
  CHECK_THROWS_AS(w.validate(), ConfigError);
}

TEST_CASE("weights JSON round trip and unknown keys") {
  LossWeights w;
  w.w_cyc = 7.5;
  w.phase_schedule[Phase::Sr].w_content = 3.0;
  const LossWeights back = loss_weights_from_json(to_json(w));
  CHECK(back.w_cyc == 7.5);
  CHECK(back.phase_schedule.at(Phase::Sr).w_content == 3.0);
  CHECK_FALSE(back.phase_schedule.at(Phase::Sr).w_cyc.has_value());
  CHECK_THROWS_AS(loss_weights_from_json(nlohmann::json{{"w_bogus", 1.0}}), ConfigError);
}

TEST_CASE("phase names") {
  CHECK(parse_phase("DENOISE") == Phase::Denoise);
  CHECK(parse_phase("SR") == Phase::Sr);
  CHECK(to_string(Phase::Joint) == "JOINT");
  CHECK(Phase::Denoise < Phase::Sr);
  CHECK(Phase::Sr < Phase::Joint);
}

TEST_CASE("graph loss ops agree with the functional forms") {
  const Tensor a = test::random_tensor(2, 4, 4, 1), b = test::random_tensor(2, 4, 4, 2);
  nn::Graph g;
  const auto ia = g.constant(a), ib = g.constant(b);
  CHECK(g.scalar(loss_ops::mae(g, ia, ib)) == doctest::Approx(cycle_consistency(a, b)).epsilon(1e-15));
  CHECK(g.scalar(loss_ops::mse(g, ia, ib)) == doctest::Approx(diffusion_loss(a, b)).epsilon(1e-15));
  CHECK(g.scalar(loss_ops::tv(g, ia)) == doctest::Approx(tv_loss(a)).epsilon(1e-15));
  CHECK(g.scalar(loss_ops::adversarial_d(g, ia, ib)) == doctest::Approx(adversarial_d(a.v, b.v)).epsilon(1e-15));
  CHECK(g.scalar(loss_ops::adversarial_g(g, ib)) == doctest::Approx(adversarial_g(b.v)).epsilon(1e-15));
  CHECK(g.scalar(loss_ops::feature_distance(g, ia, ib)) ==
        doctest::Approx(content_loss(a, b, IdentityFeatureMap{})).epsilon(1e-15));
}

TEST_CASE("every loss gradient matches central differences") {
  for (const auto& r : checks::loss_gradient_suite(2024)) {
    CAPTURE(r.name);
    CHECK(r.coordinates == 100);
    CHECK(r.max_rel_error < 1e-3);
  }
}

}  // TEST_SUITE
