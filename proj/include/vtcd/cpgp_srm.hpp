#pragma once

#include <cstdint>
#include <string>
#include <vector>

#include "vtcd/losses.hpp"
#include "vtcd/nn.hpp"
#include "vtcd/volume.hpp"

namespace vtcd {

/// d-channel features over the Z-upsampled grid. Logical index [k][h][w][c'];
/// stored channel-major with each (c') plane contiguous over (h, w).
struct FeatureGrid {
  int d = 0, H = 0, W = 0, Cp = 0;
  Dims source_dims{};
  std::vector<double> v;

  FeatureGrid() = default;
  FeatureGrid(int d_, int h, int w, int cp, Dims src)
      : d(d_), H(h), W(w), Cp(cp), source_dims(src), v(static_cast<std::size_t>(d_) * h * w * cp, 0.0) {}

  std::size_t index(int k, int h, int w, int c) const {
    return ((static_cast<std::size_t>(k) * Cp + c) * H + h) * W + w;
  }
  double& at(int k, int h, int w, int c) { return v[index(k, h, w, c)]; }
  double at(int k, int h, int w, int c) const { return v[index(k, h, w, c)]; }
};

enum class EncoderKind { Conv, PassThrough };

struct SrmWidths {
  int d = 8;
  int enc_hidden = 8;
  int acc_hidden = 16;
  int head_hidden = 16;
  /// PassThrough copies the slice as its only feature channel (requires d == 1).
  EncoderKind encoder = EncoderKind::Conv;
};

constexpr int kNeighbors = 27;
constexpr int kCenterNeighbor = 13;

/// Neighbour slot of offset (dh, dw, dc), each in {-1, 0, 1}.
constexpr int neighbor_slot(int dh, int dw, int dc) { return ((dh + 1) * 3 + (dw + 1)) * 3 + (dc + 1); }

/// Frozen slice encoder, neighbour accumulator A_acc (27 d -> hidden -> 27, added
/// to a one-hot centre so the zero-initialised network starts as the identity) and
/// two decode heads (xz, yz) mapping d features to one residual intensity.
class SrmModel {
 public:
  SrmModel() : SrmModel(SrmWidths{}, 0) {}
  SrmModel(SrmWidths widths, std::uint64_t seed, bool overlay_yz = false);

  const SrmWidths& widths() const { return widths_; }
  bool overlay_yz() const { return overlay_yz_; }
  void set_overlay_yz(bool on) { overlay_yz_ = on; }

  /// All parameters including the frozen encoder (its Params have trainable = false).
  std::vector<nn::Param*> params();
  std::vector<const nn::Param*> params() const;
  nn::Param& param(const std::string& name);

  /// (1,H,W) slice node -> (d,H,W) features; encoder weights never receive gradients.
  nn::Graph::Id encode(nn::Graph& g, nn::Graph::Id slice) const;
  /// (C,H,W) volume node -> (d*C', H, W) grid node, C' = s*C, channel k*C' + c'.
  nn::Graph::Id grid(nn::Graph& g, nn::Graph::Id vol, int s) const;
  nn::Graph::Id accumulate(nn::Graph& g, nn::Graph::Id grid, int Cp, bool track);
  /// Residual (C',H,W) from an accumulated grid with the xz (head 0) or yz (head 1) decoder.
  nn::Graph::Id residual(nn::Graph& g, nn::Graph::Id acc_grid, int Cp, int head, bool track);
  /// Full SR path on a (C,H,W) node: upsample + xz residual (+ yz residual).
  nn::Graph::Id super_resolve(nn::Graph& g, nn::Graph::Id vol, int s, bool track);

  /// Decoder head evaluated on a d-vector per column of a (d, 1, N) tensor.
  Tensor decode(const Tensor& features, int head);

 private:
  nn::Graph::Id p(nn::Graph& g, nn::Param& prm, bool track) { return track ? g.param(prm) : g.frozen(prm); }

  SrmWidths widths_;
  bool overlay_yz_ = false;
  nn::Param enc_w1_, enc_b1_, enc_w2_, enc_b2_;
  nn::Param acc_w1_, acc_b1_, acc_w2_, acc_b2_;
  nn::Param head_w1_[2], head_b1_[2], head_w2_[2], head_b2_[2];
};

/// The frozen encoder as a feature map for content_loss; input (c,H,W) is encoded per channel.
class EncoderFeatureMap final : public FeatureMap {
 public:
  explicit EncoderFeatureMap(const SrmModel& m) : model_(m) {}
  Tensor forward(const Tensor& x) const override;
  Tensor vjp(const Tensor& x, const Tensor& gout) const override;

 private:
  const SrmModel& model_;
};

/// Centre-aligned linear upsample along Z (channels) by s with clamped ends.
Tensor upsample_z(const Tensor& vol, int s);
Tensor upsample_z_adjoint(const Tensor& g, int s, int depth);

namespace srm_ops {
nn::Graph::Id upsample_z(nn::Graph& g, nn::Graph::Id vol, int s);
/// Blur + block average along Z with fixed taps.
nn::Graph::Id axial_degrade(nn::Graph& g, nn::Graph::Id vol, const std::vector<double>& taps, int s);
/// Same with learnable taps held in a (1,1,k) node.
nn::Graph::Id axial_degrade(nn::Graph& g, nn::Graph::Id vol, nn::Graph::Id taps, int s);
/// XZ slice y of a (C,H,W) node as a (1,H,C) image.
nn::Graph::Id xz_slice(nn::Graph& g, nn::Graph::Id vol, int y);
nn::Graph::Id yz_slice(nn::Graph& g, nn::Graph::Id vol, int x);
}  // namespace srm_ops

FeatureGrid build_feature_grid(const Volume3D& vol, const SrmModel& model, int s);
FeatureGrid accumulate_neighbors(const FeatureGrid& grid, SrmModel& model);
Image2D overlay_slice(const Image2D& slice_lr, PlaneId plane, int index, const FeatureGrid& grid, SrmModel& model);
Volume3D super_resolve_volume(const Volume3D& vol_lr, SrmModel& model, int s);
/// Linear Z upsample of a degraded volume: the baseline the SR module overlays onto.
Volume3D trilinear_upsample(const Volume3D& vol_lr, int s);

}  // namespace vtcd
