#pragma once

#include <array>
#include <cstddef>
#include <filesystem>
#include <span>
#include <string>
#include <string_view>
#include <vector>

#include "vtcd/tensor.hpp"

namespace vtcd {

/// Voxel extents: h along X, w along Y (both lateral), c along Z (axial).
struct Dims {
  int h = 0;
  int w = 0;
  int c = 0;

  std::size_t voxels() const { return static_cast<std::size_t>(h) * w * c; }
  bool operator==(const Dims&) const = default;
};

std::string to_string(const Dims& d);

struct IntensityRange {
  double lo = 0.0;
  double hi = 1.0;
  bool operator==(const IntensityRange&) const = default;
};

enum class PlaneId { XY, XZ, YZ };

std::string_view to_string(PlaneId plane);
/// Accepts "xy", "xz", "yz" in either case.
PlaneId parse_plane(std::string_view name);

/// Row-major single-precision 2D slice.
struct Image2D {
  int rows = 0;
  int cols = 0;
  std::vector<float> data;

  Image2D() = default;
  Image2D(int r, int cl, float fill = 0.0f)
      : rows(r), cols(cl), data(static_cast<std::size_t>(r) * cl, fill) {}

  float& at(int r, int cl) { return data[static_cast<std::size_t>(r) * cols + cl]; }
  float at(int r, int cl) const { return data[static_cast<std::size_t>(r) * cols + cl]; }
};

/// Real-valued volume indexed [x][y][z]. Storage is z-major, then x, then y, which is
/// also the on-disk payload order, so an XY slice is one contiguous block.
class Volume3D {
 public:
  Volume3D() = default;
  explicit Volume3D(Dims dims, std::array<double, 3> voxel_size = {1.0, 1.0, 1.0},
                    IntensityRange range = {}, float fill = 0.0f);

  const Dims& dims() const { return dims_; }
  const std::array<double, 3>& voxel_size() const { return voxel_size_; }
  const IntensityRange& range() const { return range_; }
  void set_voxel_size(std::array<double, 3> vs) { voxel_size_ = vs; }

  std::size_t index(int x, int y, int z) const {
    return (static_cast<std::size_t>(z) * dims_.h + x) * dims_.w + y;
  }
  float& at(int x, int y, int z) { return data_[index(x, y, z)]; }
  float at(int x, int y, int z) const { return data_[index(x, y, z)]; }

  std::span<float> data() { return data_; }
  std::span<const float> data() const { return data_; }

  /// Throws ValidationError unless every value is finite and H, W >= 2, C >= 1.
  void validate() const;
  bool within_range() const;
  /// Clamps all values into the declared intensity range.
  void clip_to_range();

  bool operator==(const Volume3D& o) const;

 private:
  Dims dims_{};
  std::array<double, 3> voxel_size_{1.0, 1.0, 1.0};
  IntensityRange range_{};
  std::vector<float> data_;
};

/// Tensor view of a volume: channel = z, row = x, column = y (same memory order).
Tensor to_tensor(const Volume3D& vol);
Volume3D from_tensor(const Tensor& t, std::array<double, 3> voxel_size = {1.0, 1.0, 1.0},
                     IntensityRange range = {});

struct SliceSet {
  PlaneId plane = PlaneId::XY;
  std::vector<Image2D> slices;
  int index_axis_len = 0;
  std::vector<int> t_of_index;
};

/// Diffusion step assigned to slice `index` of `count`: round(index * steps / (count - 1)).
int step_for_index(int index, int count, int steps);

void save_volume(const Volume3D& vol, const std::filesystem::path& path);
Volume3D load_volume(const std::filesystem::path& path);

/// XY -> C slices (H, W); XZ -> W slices (H, C); YZ -> H slices (W, C).
SliceSet slice_volume(const Volume3D& vol, PlaneId plane, int steps);
Volume3D reassemble_volume(const SliceSet& ss, Dims dims);

Image2D xy_slice(const Volume3D& vol, int z);
Tensor slice_tensor(const Image2D& img);
Image2D image_from_tensor(const Tensor& t);

}  // namespace vtcd
