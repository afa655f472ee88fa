#pragma once

#include <cstddef>
#include <span>
#include <vector>

namespace vtcd {

/// Dense channel-major (c, h, w) array of doubles. A 2D field is a tensor with c == 1.
struct Tensor {
  int c = 0;
  int h = 0;
  int w = 0;
  std::vector<double> v;

  Tensor() = default;
  Tensor(int channels, int height, int width, double fill = 0.0)
      : c(channels), h(height), w(width),
        v(static_cast<std::size_t>(channels) * height * width, fill) {}

  static Tensor field(int height, int width, double fill = 0.0) {
    return Tensor(1, height, width, fill);
  }

  std::size_t size() const { return v.size(); }
  std::size_t plane() const { return static_cast<std::size_t>(h) * w; }

  double& at(int ch, int y, int x) {
    return v[(static_cast<std::size_t>(ch) * h + y) * w + x];
  }
  double at(int ch, int y, int x) const {
    return v[(static_cast<std::size_t>(ch) * h + y) * w + x];
  }

  std::span<double> channel(int ch) {
    return {v.data() + static_cast<std::size_t>(ch) * plane(), plane()};
  }
  std::span<const double> channel(int ch) const {
    return {v.data() + static_cast<std::size_t>(ch) * plane(), plane()};
  }

  bool same_shape(const Tensor& o) const { return c == o.c && h == o.h && w == o.w; }
};

}  // namespace vtcd
