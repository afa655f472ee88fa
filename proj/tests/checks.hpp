#pragma once

#include <cstdint>
#include <filesystem>
#include <string>
#include <vector>

#include "vtcd/phantom.hpp"
#include "vtcd/trainer.hpp"

// Oracle routines shared by the unit tests and the acceptance runner.
namespace vtcd::checks {

/// Max-abs error of q_sample followed by full_reverse with the true-noise predictor
/// (T = 10, sigma = 0) on a random 8x8 field.
double oracle_round_trip_error(std::uint64_t seed);

struct GradReport {
  std::string name;
  double max_rel_error = 0.0;
  int coordinates = 0;
};

/// Central differences (step 1e-4) against every analytic loss gradient, `coords`
/// random coordinates per loss, each on freshly drawn 4x4 inputs.
std::vector<GradReport> loss_gradient_suite(std::uint64_t seed, int coords = 100);

/// One-hot accumulator, zero decode heads, s = 1 over random volumes; other weights random.
bool srm_identity_exact(std::uint64_t seed);
/// lambda = 0 chain through the denoiser vs the plain chain with the same predictor and seed.
bool denoiser_lambda0_exact(std::uint64_t seed);

bool volume_file_round_trip(const std::filesystem::path& dir, std::uint64_t seed);
bool slicing_round_trip(std::uint64_t seed);

struct ResumeReport {
  bool losses_equal = false;
  bool params_equal = false;
  bool blobs_equal = false;
  int steps_compared = 0;
};
/// Trains DENOISE/SR/JOINT uninterrupted and again with a stop after the first epoch
/// plus a resume; compares every later step and the final parameters.
ResumeReport checkpoint_resume(const std::filesystem::path& dir, std::uint64_t seed);

struct ClosedForms {
  double psnr_offset_db = 0.0;
  double ssim_self = 0.0;
  double tv_ramp = 0.0;
};
ClosedForms closed_forms();

/// Spearman correlation between slice index and background noise std of one degraded phantom.
double noise_rank_correlation(std::uint64_t seed, int* slices = nullptr);

/// Phantom set used by the smoke restoration run: 32^3 clean, s = 4.
PhantomSpec smoke_phantom_spec(std::uint64_t seed);
DegradationSpec smoke_degradation_spec(std::uint64_t seed);
/// Full configuration of the smoke run and its ablation (lambda 0, no TV).
TrainConfig smoke_config(std::uint64_t seed);
TrainConfig smoke_ablation_config(std::uint64_t seed);

struct SmokeReport {
  double baseline_median = 0.0;
  double full_median = 0.0;
  double ablation_median = 0.0;
  double seconds = 0.0;
};
SmokeReport smoke_restoration(const std::filesystem::path& dir, std::uint64_t seed);

struct OverfitReport {
  double initial = 0.0;
  double final_mean = 0.0;
  double ratio = 0.0;
};
/// JOINT-only training on one volume; final = mean total of the last 10 of `steps` steps.
OverfitReport overfit_joint(const std::filesystem::path& dir, std::uint64_t seed, int steps = 200);

struct ShapeReport {
  bool sr_shapes = false;
  bool denoise_shape = false;
  bool dataset_pairs = false;
};
ShapeReport shape_laws(const std::filesystem::path& dir, std::uint64_t seed);

}  // namespace vtcd::checks
