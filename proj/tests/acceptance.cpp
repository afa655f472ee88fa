// Acceptance runner: one PASS/FAIL line per criterion, non-zero exit if any fails.

#include <algorithm>
#include <chrono>
#include <cmath>
#include <cstdio>
#include <functional>
#include <set>
#include <string>
#include <vector>

#include "CLI11.hpp"
#include "checks.hpp"
#include "test_util.hpp"

using namespace vtcd;

namespace {

using Clock = std::chrono::steady_clock;

double since(Clock::time_point t0) { return std::chrono::duration<double>(Clock::now() - t0).count(); }

double median(std::vector<double> v) {
  std::sort(v.begin(), v.end());
  const std::size_t n = v.size();
  return n % 2 ? v[n / 2] : 0.5 * (v[n / 2 - 1] + v[n / 2]);
}

struct Outcome {
  bool pass;
  std::string detail;
};

std::string fmt(const char* f, auto... args) {
  char buf[512];
  std::snprintf(buf, sizeof buf, f, args...);
  return buf;
}

const std::vector<std::uint64_t> kSeeds{1, 2, 3};

Outcome c1() {
  const auto t0 = Clock::now();
  double worst = 0.0;
  for (auto s : kSeeds) worst = std::max(worst, checks::oracle_round_trip_error(s));
  const double secs = since(t0) / kSeeds.size();
  return {worst < 1e-5 && secs < 1.0, fmt("max-abs error %.3e (< 1e-5), %.3f s per run", worst, secs)};
}

Outcome c2() {
  const auto t0 = Clock::now();
  const auto reps = checks::loss_gradient_suite(2024, 100);
  const double secs = since(t0);
  double worst = 0.0;
  std::string worst_name;
  bool counts = true;
  for (const auto& r : reps) {
    counts = counts && r.coordinates == 100;
    if (r.max_rel_error >= worst) {
      worst = r.max_rel_error;
      worst_name = r.name;
    }
  }
  return {counts && worst < 1e-3 && secs < 30.0,
          fmt("%zu losses x 100 coords, worst rel error %.3e (%s), %.1f s", reps.size(), worst, worst_name.c_str(),
              secs)};
}

Outcome c3() {
  bool srm = true, dn = true;
  for (auto s : kSeeds) {
    srm = srm && checks::srm_identity_exact(s);
    dn = dn && checks::denoiser_lambda0_exact(s);
  }
  return {srm && dn, fmt("srm identity %s, denoiser lambda=0 %s", srm ? "bit-exact" : "differs",
                         dn ? "bit-exact" : "differs")};
}

Outcome c4() {
  test::TempDir dir("acc4");
  bool vol = true, sl = true;
  for (auto s : kSeeds) {
    vol = vol && checks::volume_file_round_trip(dir.path(), s);
    sl = sl && checks::slicing_round_trip(s);
  }
  const auto r = checks::checkpoint_resume(dir / "resume", 7);
  const bool ck = r.losses_equal && r.params_equal && r.blobs_equal;
  return {vol && sl && ck, fmt("volume file %d, slicing %d, resume: %d steps equal %d, params %d, blob %d", vol, sl,
                               r.steps_compared, r.losses_equal, r.params_equal, r.blobs_equal)};
}

Outcome c5() {
  const auto c = checks::closed_forms();
  const bool ok = std::abs(c.psnr_offset_db - 20.0) <= 1e-9 && c.ssim_self == 1.0 && c.tv_ramp == 0.25;
  return {ok, fmt("psnr %.12f dB, ssim(x,x) %.17g, tv %.17g", c.psnr_offset_db, c.ssim_self, c.tv_ramp)};
}

Outcome c6() {
  bool ok = true;
  std::string d;
  for (auto s : kSeeds) {
    int n = 0;
    const double rho = checks::noise_rank_correlation(s, &n);
    ok = ok && rho > 0.9 && n >= 8;
    d += fmt("seed %llu rho %.3f over %d slices; ", static_cast<unsigned long long>(s), rho, n);
  }
  return {ok, d};
}

Outcome c7() {
  test::TempDir dir("acc7");
  bool ok = true;
  double total = 0.0;
  std::string d;
  for (auto s : kSeeds) {
    const auto r = checks::smoke_restoration(dir / std::to_string(s), s);
    total += r.seconds;
    const bool pass = r.full_median >= r.baseline_median + 1.0 && r.full_median >= r.ablation_median;
    ok = ok && pass;
    d += fmt("seed %llu full %.2f / trilinear %.2f / ablation %.2f dB (%.0f s)%s; ",
             static_cast<unsigned long long>(s), r.full_median, r.baseline_median, r.ablation_median, r.seconds,
             pass ? "" : " FAIL");
  }
  ok = ok && total <= 1800.0;
  return {ok, d + fmt("total %.0f s", total)};
}

Outcome c8() {
  test::TempDir dir("acc8");
  std::vector<double> ratios;
  std::string d;
  const auto t0 = Clock::now();
  for (auto s : kSeeds) {
    const auto r = checks::overfit_joint(dir / std::to_string(s), s, 200);
    ratios.push_back(r.ratio);
    d += fmt("seed %llu %.3f -> %.3f (x%.3f); ", static_cast<unsigned long long>(s), r.initial, r.final_mean, r.ratio);
  }
  const double secs = since(t0) / kSeeds.size();
  const double m = median(ratios);
  return {m < 0.7 && secs < 300.0, d + fmt("median ratio %.3f (< 0.7), %.0f s per run", m, secs)};
}

Outcome c9() {
  test::TempDir dir("acc9");
  bool ok = true;
  for (auto s : kSeeds) {
    const auto r = checks::shape_laws(dir / std::to_string(s), s);
    ok = ok && r.sr_shapes && r.denoise_shape && r.dataset_pairs;
  }
  return {ok, ok ? "sr (H,W,C)->(H,W,sC) for s in {1,2,4}; denoise preserves shape; dataset pairs consistent"
                 : "shape law violated"};
}

}  // namespace

int main(int argc, char** argv) {
  CLI::App app{"acceptance criteria"};
  std::vector<int> only;
  app.add_option("--only", only, "run only these criteria (1-9)")->check(CLI::Range(1, 9));
  CLI11_PARSE(app, argc, argv);
  const std::set<int> pick(only.begin(), only.end());

  const std::vector<std::pair<const char*, std::function<Outcome()>>> all{
      {"oracle diffusion round trip", c1}, {"loss gradient suite", c2},       {"identity paths", c3},
      {"round trips", c4},                 {"closed-form metrics", c5},       {"phantom noise prior", c6},
      {"smoke restoration", c7},           {"single-volume overfit", c8},    {"shape laws", c9}};

  int failed = 0;
  for (std::size_t i = 0; i < all.size(); ++i) {
    const int id = static_cast<int>(i) + 1;
    if (!pick.empty() && !pick.count(id)) continue;
    Outcome o{false, ""};
    try {
      o = all[i].second();
    } catch (const std::exception& e) {
      o = {false, std::string("exception: ") + e.what()};
    }
    failed += !o.pass;
    std::printf("%s %d %s: %s\n", o.pass ? "PASS" : "FAIL", id, all[i].first, o.detail.c_str());
    std::fflush(stdout);
  }
  return failed ? 1 : 0;
}
