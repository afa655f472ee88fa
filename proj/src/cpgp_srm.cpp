#include "vtcd/cpgp_srm.hpp"

#include <algorithm>
#include <cmath>
#include <memory>

#include "vtcd/error.hpp"
#include "vtcd/phantom.hpp"

namespace vtcd {

namespace {

constexpr std::uint64_t kEncoderSeed = 0x5EEDE11CULL;

using nn::Graph;
using Id = Graph::Id;

struct Lerp {
  int z0, z1;
  double a;
};

Lerp grid_position(int c, int s, int depth) {
  const int z0 = std::min(c / s, depth - 1);
  const double a = static_cast<double>(c - z0 * s) / s;
  return {z0, std::min(z0 + 1, depth - 1), a};
}

Lerp centered_position(int c, int s, int depth) {
  double z = (c + 0.5) / s - 0.5;
  z = std::clamp(z, 0.0, static_cast<double>(depth - 1));
  const int z0 = static_cast<int>(std::floor(z));
  return {z0, std::min(z0 + 1, depth - 1), z - z0};
}

// Gathers the 27 clamped neighbours of every grid element: (d*C', H, W) -> (27 d, 1, N).
Id gather_neighbors(Graph& g, Id grid, int d, int Cp) {
  const Tensor& G = g.value(grid);
  const int H = G.h, W = G.w;
  const std::size_t N = static_cast<std::size_t>(Cp) * H * W;
  Tensor out(kNeighbors * d, 1, static_cast<int>(N));
  for (int dh = -1; dh <= 1; ++dh)
    for (int dw = -1; dw <= 1; ++dw)
      for (int dc = -1; dc <= 1; ++dc) {
        const int j = neighbor_slot(dh, dw, dc);
        for (int k = 0; k < d; ++k) {
          double* dst = out.v.data() + static_cast<std::size_t>(j * d + k) * N;
          for (int c = 0; c < Cp; ++c) {
            const int cc = std::clamp(c + dc, 0, Cp - 1);
            for (int h = 0; h < H; ++h) {
              const int hh = std::clamp(h + dh, 0, H - 1);
              const double* src = G.v.data() + ((static_cast<std::size_t>(k) * Cp + cc) * H + hh) * W;
              double* row = dst + (static_cast<std::size_t>(c) * H + h) * W;
              for (int w = 0; w < W; ++w) row[w] = src[std::clamp(w + dw, 0, W - 1)];
            }
          }
        }
      }
  return g.push(std::move(out), {grid}, [&g, grid, d, Cp, H, W, N](const Tensor& go) {
    Tensor& t = g.acc(grid);
    for (int dh = -1; dh <= 1; ++dh)
      for (int dw = -1; dw <= 1; ++dw)
        for (int dc = -1; dc <= 1; ++dc) {
          const int j = neighbor_slot(dh, dw, dc);
          for (int k = 0; k < d; ++k) {
            const double* src = go.v.data() + static_cast<std::size_t>(j * d + k) * N;
            for (int c = 0; c < Cp; ++c) {
              const int cc = std::clamp(c + dc, 0, Cp - 1);
              for (int h = 0; h < H; ++h) {
                const int hh = std::clamp(h + dh, 0, H - 1);
                double* dst = t.v.data() + ((static_cast<std::size_t>(k) * Cp + cc) * H + hh) * W;
                const double* row = src + (static_cast<std::size_t>(c) * H + h) * W;
                for (int w = 0; w < W; ++w) dst[std::clamp(w + dw, 0, W - 1)] += row[w];
              }
            }
          }
        }
  });
}

// out(k, v) = sum_j theta(j, v) * G(j d + k, v)
Id neighbor_sum(Graph& g, Id gathered, Id theta, int d) {
  const Tensor& G = g.value(gathered);
  const Tensor& T = g.value(theta);
  const std::size_t N = static_cast<std::size_t>(G.w);
  Tensor out(d, 1, static_cast<int>(N));
  for (int j = 0; j < kNeighbors; ++j) {
    const double* th = T.v.data() + static_cast<std::size_t>(j) * N;
    for (int k = 0; k < d; ++k) {
      const double* src = G.v.data() + static_cast<std::size_t>(j * d + k) * N;
      double* dst = out.v.data() + static_cast<std::size_t>(k) * N;
      for (std::size_t i = 0; i < N; ++i) dst[i] += th[i] * src[i];
    }
  }
  return g.push(std::move(out), {gathered, theta}, [&g, gathered, theta, d, N](const Tensor& go) {
    const Tensor& G2 = g.value(gathered);
    const Tensor& T2 = g.value(theta);
    if (g.tracked(theta)) {
      Tensor& gt = g.acc(theta);
      for (int j = 0; j < kNeighbors; ++j)
        for (int k = 0; k < d; ++k) {
          const double* src = G2.v.data() + static_cast<std::size_t>(j * d + k) * N;
          const double* gk = go.v.data() + static_cast<std::size_t>(k) * N;
          double* dst = gt.v.data() + static_cast<std::size_t>(j) * N;
          for (std::size_t i = 0; i < N; ++i) dst[i] += gk[i] * src[i];
        }
    }
    if (g.tracked(gathered)) {
      Tensor& gg = g.acc(gathered);
      for (int j = 0; j < kNeighbors; ++j)
        for (int k = 0; k < d; ++k) {
          const double* th = T2.v.data() + static_cast<std::size_t>(j) * N;
          const double* gk = go.v.data() + static_cast<std::size_t>(k) * N;
          double* dst = gg.v.data() + static_cast<std::size_t>(j * d + k) * N;
          for (std::size_t i = 0; i < N; ++i) dst[i] += th[i] * gk[i];
        }
    }
  });
}

// (C*d, H, W) stacked slice features (slice-major) -> (d*C', H, W) grid (channel-major).
Id interpolate_grid(Graph& g, Id feats, int d, int depth, int s) {
  const Tensor& F = g.value(feats);
  const int Cp = depth * s;
  const std::size_t plane = F.plane();
  Tensor out(d * Cp, F.h, F.w);
  for (int k = 0; k < d; ++k)
    for (int c = 0; c < Cp; ++c) {
      const Lerp l = grid_position(c, s, depth);
      auto dst = out.channel(k * Cp + c);
      auto f0 = F.channel(l.z0 * d + k);
      auto f1 = F.channel(l.z1 * d + k);
      for (std::size_t i = 0; i < plane; ++i) dst[i] = f0[i] + l.a * (f1[i] - f0[i]);
    }
  return g.push(std::move(out), {feats}, [&g, feats, d, depth, s, Cp, plane](const Tensor& go) {
    Tensor& t = g.acc(feats);
    for (int k = 0; k < d; ++k)
      for (int c = 0; c < Cp; ++c) {
        const Lerp l = grid_position(c, s, depth);
        auto src = go.channel(k * Cp + c);
        auto g0 = t.channel(l.z0 * d + k);
        auto g1 = t.channel(l.z1 * d + k);
        for (std::size_t i = 0; i < plane; ++i) {
          g0[i] += (1.0 - l.a) * src[i];
          g1[i] += l.a * src[i];
        }
      }
  });
}

}  // namespace

Tensor upsample_z(const Tensor& vol, int s) {
  if (s < 1) throw ValidationError("upsample factor must be >= 1");
  const int Cp = vol.c * s;
  Tensor out(Cp, vol.h, vol.w);
  const std::size_t plane = vol.plane();
  for (int c = 0; c < Cp; ++c) {
    const Lerp l = centered_position(c, s, vol.c);
    auto dst = out.channel(c);
    auto a = vol.channel(l.z0);
    auto b = vol.channel(l.z1);
    for (std::size_t i = 0; i < plane; ++i) dst[i] = a[i] + l.a * (b[i] - a[i]);
  }
  return out;
}

Tensor upsample_z_adjoint(const Tensor& g, int s, int depth) {
  Tensor out(depth, g.h, g.w);
  const std::size_t plane = g.plane();
  for (int c = 0; c < g.c; ++c) {
    const Lerp l = centered_position(c, s, depth);
    auto src = g.channel(c);
    auto a = out.channel(l.z0);
    auto b = out.channel(l.z1);
    for (std::size_t i = 0; i < plane; ++i) {
      a[i] += (1.0 - l.a) * src[i];
      b[i] += l.a * src[i];
    }
  }
  return out;
}

namespace srm_ops {

Id upsample_z(Graph& g, Id vol, int s) {
  const int depth = g.value(vol).c;
  return g.push(vtcd::upsample_z(g.value(vol), s), {vol}, [&g, vol, s, depth](const Tensor& go) {
    const Tensor adj = upsample_z_adjoint(go, s, depth);
    Tensor& t = g.acc(vol);
    for (std::size_t i = 0; i < t.v.size(); ++i) t.v[i] += adj.v[i];
  });
}

Id axial_degrade(Graph& g, Id vol, const std::vector<double>& taps, int s) {
  const int depth = g.value(vol).c;
  return g.push(vtcd::axial_degrade(g.value(vol), taps, s), {vol}, [&g, vol, taps, s, depth](const Tensor& go) {
    const Tensor adj = axial_degrade_adjoint(go, taps, s, depth);
    Tensor& t = g.acc(vol);
    for (std::size_t i = 0; i < t.v.size(); ++i) t.v[i] += adj.v[i];
  });
}

Id axial_degrade(Graph& g, Id vol, Id taps, int s) {
  const std::vector<double> k(g.value(taps).v);
  const int depth = g.value(vol).c;
  return g.push(vtcd::axial_degrade(g.value(vol), k, s), {vol, taps}, [&g, vol, taps, s, depth](const Tensor& go) {
    const std::vector<double> k2(g.value(taps).v);
    if (g.tracked(vol)) {
      const Tensor adj = axial_degrade_adjoint(go, k2, s, depth);
      Tensor& t = g.acc(vol);
      for (std::size_t i = 0; i < t.v.size(); ++i) t.v[i] += adj.v[i];
    }
    if (g.tracked(taps)) {
      const Tensor& V = g.value(vol);
      Tensor& gt = g.acc(taps);
      const int r = static_cast<int>(k2.size() / 2);
      const std::size_t plane = V.plane();
      for (int z = 0; z < depth; ++z) {
        auto gz = go.channel(z / s);
        for (int j = -r; j <= r; ++j) {
          auto src = V.channel(std::clamp(z + j, 0, depth - 1));
          double acc = 0.0;
          for (std::size_t i = 0; i < plane; ++i) acc += gz[i] * src[i];
          gt.v[j + r] += acc / s;
        }
      }
    }
  });
}

Id xz_slice(Graph& g, Id vol, int y) {
  const Tensor& V = g.value(vol);
  if (y < 0 || y >= V.w) throw DimensionError("xz slice index out of range");
  Tensor out(1, V.h, V.c);
  for (int x = 0; x < V.h; ++x)
    for (int z = 0; z < V.c; ++z) out.at(0, x, z) = V.at(z, x, y);
  return g.push(std::move(out), {vol}, [&g, vol, y](const Tensor& go) {
    Tensor& t = g.acc(vol);
    for (int x = 0; x < t.h; ++x)
      for (int z = 0; z < t.c; ++z) t.at(z, x, y) += go.at(0, x, z);
  });
}

Id yz_slice(Graph& g, Id vol, int x) {
  const Tensor& V = g.value(vol);
  if (x < 0 || x >= V.h) throw DimensionError("yz slice index out of range");
  Tensor out(1, V.w, V.c);
  for (int y = 0; y < V.w; ++y)
    for (int z = 0; z < V.c; ++z) out.at(0, y, z) = V.at(z, x, y);
  return g.push(std::move(out), {vol}, [&g, vol, x](const Tensor& go) {
    Tensor& t = g.acc(vol);
    for (int y = 0; y < t.w; ++y)
      for (int z = 0; z < t.c; ++z) t.at(z, x, y) += go.at(0, y, z);
  });
}

}  // namespace srm_ops

SrmModel::SrmModel(SrmWidths w, std::uint64_t seed, bool overlay_yz) : widths_(w), overlay_yz_(overlay_yz) {
  if (w.d < 1 || w.enc_hidden < 1 || w.acc_hidden < 1 || w.head_hidden < 1)
    throw ConfigError("SRM widths must be positive");
  if (w.encoder == EncoderKind::PassThrough && w.d != 1) throw ConfigError("pass-through encoder requires d == 1");
  Rng enc_rng(kEncoderSeed);
  enc_w1_ = nn::conv_weight("srm.enc1.w", w.enc_hidden, 1, 3, enc_rng);
  enc_b1_ = nn::zeros("srm.enc1.b", w.enc_hidden);
  enc_w2_ = nn::conv_weight("srm.enc2.w", w.d, w.enc_hidden, 3, enc_rng);
  enc_b2_ = nn::zeros("srm.enc2.b", w.d);
  for (auto* prm : {&enc_w1_, &enc_b1_, &enc_w2_, &enc_b2_}) prm->trainable = false;

  Rng rng(seed ^ 0x9E3779B97F4A7C15ULL);
  acc_w1_ = nn::conv_weight("srm.acc1.w", w.acc_hidden, kNeighbors * w.d, 1, rng);
  acc_b1_ = nn::zeros("srm.acc1.b", w.acc_hidden);
  acc_w2_ = nn::zeros("srm.acc2.w", kNeighbors, w.acc_hidden, 1);
  acc_b2_ = nn::zeros("srm.acc2.b", kNeighbors);
  const char* names[2] = {"xz", "yz"};
  for (int h = 0; h < 2; ++h) {
    const std::string pre = std::string("srm.head_") + names[h];
    head_w1_[h] = nn::conv_weight(pre + "1.w", w.head_hidden, w.d, 1, rng);
    head_b1_[h] = nn::zeros(pre + "1.b", w.head_hidden);
    head_w2_[h] = nn::zeros(pre + "2.w", 1, w.head_hidden, 1);
    head_b2_[h] = nn::zeros(pre + "2.b", 1);
  }
}

std::vector<nn::Param*> SrmModel::params() {
  std::vector<nn::Param*> ps{&enc_w1_, &enc_b1_, &enc_w2_, &enc_b2_, &acc_w1_, &acc_b1_, &acc_w2_, &acc_b2_};
  for (int h = 0; h < 2; ++h)
    for (auto* prm : {&head_w1_[h], &head_b1_[h], &head_w2_[h], &head_b2_[h]}) ps.push_back(prm);
  return ps;
}

std::vector<const nn::Param*> SrmModel::params() const {
  auto ps = const_cast<SrmModel*>(this)->params();
  return {ps.begin(), ps.end()};
}

nn::Param& SrmModel::param(const std::string& name) {
  for (auto* prm : params())
    if (prm->name == name) return *prm;
  throw ValidationError("no SRM parameter named '" + name + "'");
}

Id SrmModel::encode(Graph& g, Id slice) const {
  if (widths_.encoder == EncoderKind::PassThrough) return g.reshape(slice, 1, g.value(slice).h, g.value(slice).w);
  const auto h = g.tanh(g.conv2d(slice, g.frozen(enc_w1_), g.frozen(enc_b1_), 3));
  return g.conv2d(h, g.frozen(enc_w2_), g.frozen(enc_b2_), 3);
}

Id SrmModel::grid(Graph& g, Id vol, int s) const {
  if (s < 1) throw ValidationError("SR scale must be >= 1");
  const int depth = g.value(vol).c;
  std::vector<Id> feats;
  feats.reserve(depth);
  for (int z = 0; z < depth; ++z) feats.push_back(encode(g, g.channel(vol, z)));
  return interpolate_grid(g, g.concat(feats), widths_.d, depth, s);
}

Id SrmModel::accumulate(Graph& g, Id grid, int Cp, bool track) {
  const int d = widths_.d;
  const int gc = g.value(grid).c, H = g.value(grid).h, W = g.value(grid).w;
  if (gc != d * Cp) throw DimensionError("grid channel count does not match d * C'");
  const int N = Cp * H * W;
  const Id gathered = gather_neighbors(g, grid, d, Cp);
  const Id hid = g.lrelu(g.conv2d(gathered, p(g, acc_w1_, track), p(g, acc_b1_, track), 1));
  const Id raw = g.conv2d(hid, p(g, acc_w2_, track), p(g, acc_b2_, track), 1);
  Tensor onehot(kNeighbors, 1, N);
  std::fill_n(onehot.v.begin() + static_cast<std::ptrdiff_t>(kCenterNeighbor) * N, N, 1.0);
  const Id theta = g.add(raw, g.constant(std::move(onehot)));
  const Id acc = neighbor_sum(g, gathered, theta, d);
  return g.reshape(acc, d * Cp, H, W);
}

Id SrmModel::residual(Graph& g, Id acc_grid, int Cp, int head, bool track) {
  const int H = g.value(acc_grid).h, W = g.value(acc_grid).w;
  const int N = Cp * H * W;
  const Id f = g.reshape(acc_grid, widths_.d, 1, N);
  const Id hid = g.lrelu(g.conv2d(f, p(g, head_w1_[head], track), p(g, head_b1_[head], track), 1));
  const Id r = g.conv2d(hid, p(g, head_w2_[head], track), p(g, head_b2_[head], track), 1);
  return g.reshape(r, Cp, H, W);
}

Id SrmModel::super_resolve(Graph& g, Id vol, int s, bool track) {
  const int Cp = g.value(vol).c * s;
  const Id base = srm_ops::upsample_z(g, vol, s);
  const Id acc = accumulate(g, grid(g, vol, s), Cp, track);
  Id out = g.add(base, residual(g, acc, Cp, 0, track));
  if (overlay_yz_) out = g.add(out, residual(g, acc, Cp, 1, track));
  return out;
}

Tensor SrmModel::decode(const Tensor& features, int head) {
  Graph g;
  const Id f = g.constant(features);
  const Id hid = g.lrelu(g.conv2d(f, g.frozen(head_w1_[head]), g.frozen(head_b1_[head]), 1));
  return g.value(g.conv2d(hid, g.frozen(head_w2_[head]), g.frozen(head_b2_[head]), 1));
}

Tensor EncoderFeatureMap::forward(const Tensor& x) const {
  Graph g;
  const Id in = g.constant(x);
  std::vector<Id> fs;
  for (int c = 0; c < x.c; ++c) fs.push_back(model_.encode(g, g.channel(in, c)));
  return g.value(g.concat(fs));
}

Tensor EncoderFeatureMap::vjp(const Tensor& x, const Tensor& gout) const {
  Graph g;
  const Id in = g.variable(x);
  std::vector<Id> fs;
  for (int c = 0; c < x.c; ++c) fs.push_back(model_.encode(g, g.channel(in, c)));
  const Id f = g.concat(fs);
  if (!g.value(f).same_shape(gout)) throw DimensionError("vjp: output gradient shape mismatch");
  const double n = static_cast<double>(gout.size());
  const Id dot = g.scale(g.mean(g.mul(f, g.constant(gout))), n);
  g.backward(dot);
  return g.grad(in);
}

FeatureGrid build_feature_grid(const Volume3D& vol, const SrmModel& model, int s) {
  vol.validate();
  Graph g;
  const Id grid = model.grid(g, g.constant(to_tensor(vol)), s);
  const Tensor& G = g.value(grid);
  FeatureGrid fg(model.widths().d, G.h, G.w, vol.dims().c * s, vol.dims());
  fg.v = G.v;
  return fg;
}

FeatureGrid accumulate_neighbors(const FeatureGrid& grid, SrmModel& model) {
  if (grid.d != model.widths().d) throw DimensionError("grid channel count differs from the model's d");
  Graph g;
  Tensor t(grid.d * grid.Cp, grid.H, grid.W);
  t.v = grid.v;
  const Id acc = model.accumulate(g, g.constant(std::move(t)), grid.Cp, false);
  FeatureGrid out = grid;
  out.v = g.value(acc).v;
  return out;
}

Image2D overlay_slice(const Image2D& slice_lr, PlaneId plane, int index, const FeatureGrid& grid, SrmModel& model) {
  if (plane == PlaneId::XY) throw ValidationError("overlay_slice applies to XZ or YZ slices");
  const bool xz = plane == PlaneId::XZ;
  const int rows = xz ? grid.H : grid.W;
  const int limit = xz ? grid.W : grid.H;
  if (index < 0 || index >= limit)
    throw DimensionError("slice index " + std::to_string(index) + " outside [0," + std::to_string(limit) + ")");
  if (slice_lr.rows != rows) throw DimensionError("slice row count does not match the grid");
  const int depth = grid.source_dims.c;
  const int s = depth > 0 ? grid.Cp / depth : 1;

  Tensor base(1, rows, grid.Cp);
  if (slice_lr.cols == grid.Cp) {
    for (std::size_t i = 0; i < base.v.size(); ++i) base.v[i] = slice_lr.data[i];
  } else if (slice_lr.cols * s == grid.Cp) {
    Tensor cols(slice_lr.cols, 1, rows);
    for (int r = 0; r < rows; ++r)
      for (int c = 0; c < slice_lr.cols; ++c) cols.at(c, 0, r) = slice_lr.at(r, c);
    const Tensor up = upsample_z(cols, s);
    for (int r = 0; r < rows; ++r)
      for (int c = 0; c < grid.Cp; ++c) base.at(0, r, c) = up.at(c, 0, r);
  } else {
    throw DimensionError("slice depth " + std::to_string(slice_lr.cols) + " incompatible with grid depth " +
                         std::to_string(grid.Cp));
  }

  Tensor feats(grid.d, 1, rows * grid.Cp);
  for (int k = 0; k < grid.d; ++k)
    for (int r = 0; r < rows; ++r)
      for (int c = 0; c < grid.Cp; ++c)
        feats.at(k, 0, r * grid.Cp + c) = xz ? grid.at(k, r, index, c) : grid.at(k, index, r, c);
  const Tensor res = model.decode(feats, xz ? 0 : 1);

  Image2D out(rows, grid.Cp);
  for (int r = 0; r < rows; ++r)
    for (int c = 0; c < grid.Cp; ++c)
      out.at(r, c) = static_cast<float>(base.at(0, r, c) + res.v[static_cast<std::size_t>(r) * grid.Cp + c]);
  return out;
}

Volume3D super_resolve_volume(const Volume3D& vol_lr, SrmModel& model, int s) {
  vol_lr.validate();
  if (s < 1) throw ValidationError("SR scale must be >= 1");
  Graph g;
  const Id out = model.super_resolve(g, g.constant(to_tensor(vol_lr)), s, false);
  auto vs = vol_lr.voxel_size();
  vs[2] /= s;
  return from_tensor(g.value(out), vs, vol_lr.range());
}

Volume3D trilinear_upsample(const Volume3D& vol_lr, int s) {
  auto vs = vol_lr.voxel_size();
  vs[2] /= s;
  return from_tensor(upsample_z(to_tensor(vol_lr), s), vs, vol_lr.range());
}

}  // namespace vtcd
