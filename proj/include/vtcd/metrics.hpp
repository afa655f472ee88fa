#pragma once

#include <filesystem>
#include <map>
#include <optional>
#include <span>
#include <string>
#include <vector>

#include "json.hpp"
#include "vtcd/tensor.hpp"
#include "vtcd/volume.hpp"

namespace vtcd {

/// Reported instead of +inf when the two inputs are identical.
constexpr double kPsnrCap = 99.0;

double psnr(std::span<const double> pred, std::span<const double> ref, double range);
double psnr(std::span<const float> pred, std::span<const float> ref, double range);
double psnr(const Image2D& pred, const Image2D& ref, double range);
double psnr(const Volume3D& pred, const Volume3D& ref, double range);

/// Gaussian-window SSIM (11 taps, sigma 1.5) averaged over the valid region.
double ssim(std::span<const double> a, std::span<const double> b, int rows, int cols, double range);
double ssim(const Image2D& a, const Image2D& b, double range);

/// Mean 2D TV of the XY slices, as in tv_loss.
double tv_statistic(const Volume3D& vol);

struct PlaneMetrics {
  double psnr_db = 0.0;
  double ssim = 0.0;
  bool operator==(const PlaneMetrics&) const = default;
};

struct VolumeMetrics {
  std::string id;
  double psnr_db = 0.0;
  /// Mean over XY slices.
  double ssim = 0.0;
  double tv_in = 0.0;
  double tv_out = 0.0;
  /// Slice-averaged values for each requested plane.
  std::map<PlaneId, PlaneMetrics> planes;
  bool operator==(const VolumeMetrics&) const = default;
};

struct Aggregate {
  double mean = 0.0;
  double median = 0.0;
  /// Population standard deviation.
  double std = 0.0;
  bool operator==(const Aggregate&) const = default;
};

struct MetricsReport {
  std::vector<VolumeMetrics> per_volume;
  std::optional<std::vector<VolumeMetrics>> baseline;
  bool operator==(const MetricsReport&) const = default;
};

Aggregate aggregate(std::span<const double> values);
/// metric name -> aggregate over entries; empty when there are no entries.
std::map<std::string, Aggregate> aggregates(const std::vector<VolumeMetrics>& entries);

/// tv_in is taken from `input` when given, otherwise from `gt`.
VolumeMetrics evaluate_volume(const Volume3D& pred, const Volume3D& gt, const std::vector<PlaneId>& planes,
                              const std::string& id = "", const Volume3D* input = nullptr);

nlohmann::json to_json(const MetricsReport& r);
MetricsReport report_from_json(const nlohmann::json& j);
void write_report(const MetricsReport& r, const std::filesystem::path& path);
MetricsReport read_report(const std::filesystem::path& path);

}  // namespace vtcd
