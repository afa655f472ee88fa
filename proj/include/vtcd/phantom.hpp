#pragma once

#include <cstdint>
#include <filesystem>
#include <string>
#include <vector>

#include "json.hpp"
#include "vtcd/volume.hpp"

namespace vtcd {

struct PhantomSpec {
  Dims dims{64, 64, 32};
  int num_cells = 5;
  double radius_min = 6.0;
  double radius_max = 10.0;
  double membrane_thickness = 2.0;
  double background_level = 0.1;
  double membrane_level = 0.8;
  std::uint64_t seed = 0;
  /// When true, cell centres may lie anywhere in the volume so shells are cut by the
  /// boundary, as in a field of view that crops tissue. Otherwise shells stay inside.
  bool allow_clipping = false;

  void validate() const;
};

struct DegradationSpec {
  double sigma0 = 0.02;
  double sigma1 = 0.08;
  int axial_factor = 4;
  double axial_blur_sigma = 1.0;
  std::uint64_t seed = 0;

  void validate() const;
};

struct ManifestEntry {
  std::string clean_path;
  std::string degraded_path;
  PhantomSpec phantom_spec;
  DegradationSpec degradation_spec;
  std::string split;
};

struct DatasetManifest {
  int format_version = 1;
  std::vector<ManifestEntry> entries;
  std::vector<int> train;
  std::vector<int> eval;
  /// Directory relative paths resolve against; set on load.
  std::filesystem::path root;

  std::filesystem::path clean(int i) const { return root / entries.at(i).clean_path; }
  std::filesystem::path degraded(int i) const { return root / entries.at(i).degraded_path; }
};

/// One cell: centre, semi-axes along (x, y, z).
struct CellGeometry {
  double center[3];
  double axes[3];
};

/// Shell profile at signed distance `dist` from the mid-surface: 1 inside the
/// membrane band, cosine roll-off over one thickness, 0 beyond.
double shell_profile(double dist, double thickness);

/// Cell layout drawn for a PhantomSpec (deterministic per seed). Throws PlacementError.
std::vector<CellGeometry> place_cells(const PhantomSpec& spec);

Volume3D generate_phantom(const PhantomSpec& spec);

/// Analytic kernel used for the axial blur (clamped edges), radius ceil(3 sigma).
std::vector<double> gaussian_taps(double sigma);
/// Blur along Z then block-average by s. Deterministic, no noise.
Tensor axial_degrade(const Tensor& vol, const std::vector<double>& taps, int s);
/// Adjoint of axial_degrade with respect to its volume argument.
Tensor axial_degrade_adjoint(const Tensor& grad_lr, const std::vector<double>& taps, int s, int full_depth);

double noise_sigma_at(const DegradationSpec& deg, int z, int depth);
Volume3D degrade_volume(const Volume3D& clean, const DegradationSpec& deg);

DatasetManifest build_dataset(int n, const PhantomSpec& pspec, const DegradationSpec& dspec,
                              const std::filesystem::path& out_dir);
void write_manifest(const DatasetManifest& m, const std::filesystem::path& path);
DatasetManifest read_manifest(const std::filesystem::path& path);

nlohmann::json to_json(const PhantomSpec& s);
nlohmann::json to_json(const DegradationSpec& s);
PhantomSpec phantom_spec_from_json(const nlohmann::json& j);
DegradationSpec degradation_spec_from_json(const nlohmann::json& j);

}  // namespace vtcd
