#pragma once

#include <array>
#include <cstdint>
#include <filesystem>
#include <functional>
#include <map>
#include <optional>
#include <string>
#include <vector>

#include "json.hpp"
#include "vtcd/cpgp_srm.hpp"
#include "vtcd/diffusion.hpp"
#include "vtcd/losses.hpp"
#include "vtcd/nn.hpp"
#include "vtcd/phantom.hpp"
#include "vtcd/sid_denoiser.hpp"

namespace vtcd {

constexpr int kCheckpointVersion = 1;

struct TrainConfig {
  std::array<int, 3> epochs_per_phase{1, 1, 1};
  int steps_per_epoch = 20;
  double learning_rate = 5e-3;
  double weight_decay = 1e-5;
  bool amsgrad = true;
  /// Diffusion samples per step (slices).
  int batch_size = 4;
  int T = 16;
  double beta_start = 2e-4;
  double beta_end = 1e-3;
  std::uint64_t seed = 0;
  LossWeights loss_weights;
  int sr_scale = 4;
  /// Reverse-noise multiplier used when sampling (0: mean path).
  double sampler_eta = 0.0;
  /// Joint gradient-norm cap per parameter group; <= 0 disables.
  double grad_clip = 1.0;
  EditConfig edit;
  /// Learnable axial kernel for the HR -> LR direction in JOINT instead of the analytic one.
  bool learned_reverse = false;
  bool overlay_yz = false;
  /// Lateral crop edge for SR and JOINT steps (clamped to the volume).
  int crop = 16;
  DenoiserWidths denoiser;
  SrmWidths srm;
  int disc_width = 16;

  void validate() const;
  NoiseSchedule schedule() const;
};

nlohmann::json to_json(const TrainConfig& c);
/// Missing keys keep their defaults; unknown keys are a ConfigError.
TrainConfig train_config_from_json(const nlohmann::json& j);
TrainConfig load_train_config(const std::filesystem::path& path);

/// Fully convolutional least-squares critic emitting a patch map.
class PatchDiscriminator {
 public:
  PatchDiscriminator() = default;
  PatchDiscriminator(std::string prefix, int in_channels, int width, std::uint64_t seed);

  nn::Graph::Id forward(nn::Graph& g, nn::Graph::Id x, bool track);
  std::vector<nn::Param*> params();

 private:
  nn::Param w1_, b1_, w2_, b2_, w3_, b3_;
};

/// Every network the trainer optimises.
struct Models {
  DenoiserModel denoiser;
  SrmModel srm;
  PatchDiscriminator d_dn;
  PatchDiscriminator d_sr;
  /// Axial kernel of the learned HR -> LR generator, stored (1, 1, k).
  nn::Param gf_taps;

  Models(const TrainConfig& cfg, double axial_blur_sigma);
  std::vector<nn::Param*> all_params();
};

struct Checkpoint {
  int format_version = kCheckpointVersion;
  /// Phase and 0-based epoch of the last completed epoch.
  Phase phase = Phase::Denoise;
  int epoch = -1;
  /// Epochs completed across all phases.
  int completed_epochs = 0;
  long global_step = 0;
  TrainConfig config;
  DegradationSpec degradation;
  std::string rng_state;
  std::optional<Hyperplane> hyperplane;
  std::map<std::string, Tensor> params;
  std::map<std::string, nn::Adam::State> optimizer;
};

void save_checkpoint(const Checkpoint& ck, const std::filesystem::path& path);
/// FormatError on bad magic, truncation or a version other than kCheckpointVersion.
Checkpoint load_checkpoint(const std::filesystem::path& path);

/// Copies checkpoint parameters into models (names and shapes must match).
void load_params(Models& m, const Checkpoint& ck);

struct StepRecord {
  Phase phase;
  int epoch;
  long step;
  LossBreakdown loss;
};

struct TrainOptions {
  /// Continue from this checkpoint; its config must agree with the new one except for epochs.
  std::optional<std::filesystem::path> resume;
  /// Called after every optimisation step.
  std::function<void(const StepRecord&)> on_step;
  /// Write last.vtck / final.vtck / loss_log.jsonl into out_dir.
  bool write_files = true;
};

/// Progressive DENOISE -> SR -> JOINT optimisation over the manifest's training split.
Checkpoint train(const TrainConfig& cfg, const DatasetManifest& manifest, const std::filesystem::path& out_dir,
                 const TrainOptions& opts = {});

enum class RestoreMode { Full, DenoiseOnly, SrOnly };

/// Inference: denoise along Z then super-resolve; the result is clipped to the input range.
Volume3D restore_volume(const Checkpoint& ck, const Volume3D& vol, RestoreMode mode = RestoreMode::Full);

}  // namespace vtcd
