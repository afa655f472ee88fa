#include "vtcd/nn.hpp"

#include <algorithm>
#include <cmath>
#include <memory>

#include <Eigen/Dense>

#include "vtcd/error.hpp"

namespace vtcd::nn {

namespace {

using RMat = Eigen::Matrix<double, Eigen::Dynamic, Eigen::Dynamic, Eigen::RowMajor>;
using MapR = Eigen::Map<RMat>;
using CMapR = Eigen::Map<const RMat>;

std::string shape_str(const Tensor& t) {
  return "(" + std::to_string(t.c) + "," + std::to_string(t.h) + "," + std::to_string(t.w) + ")";
}

void im2col(const Tensor& x, int k, RMat& cols) {
  const int r = k / 2, H = x.h, W = x.w;
  cols.setZero(static_cast<Eigen::Index>(x.c) * k * k, static_cast<Eigen::Index>(H) * W);
  for (int c = 0; c < x.c; ++c)
    for (int ky = 0; ky < k; ++ky)
      for (int kx = 0; kx < k; ++kx) {
        double* row = cols.row((c * k + ky) * k + kx).data();
        const int dy = ky - r, dx = kx - r;
        for (int y = 0; y < H; ++y) {
          const int sy = y + dy;
          if (sy < 0 || sy >= H) continue;
          const double* src = x.v.data() + (static_cast<std::size_t>(c) * H + sy) * W;
          const int x0 = std::max(0, -dx), x1 = std::min(W, W - dx);
          for (int xx = x0; xx < x1; ++xx) row[y * W + xx] = src[xx + dx];
        }
      }
}

void col2im_add(const RMat& cols, int k, Tensor& gx) {
  const int r = k / 2, H = gx.h, W = gx.w;
  for (int c = 0; c < gx.c; ++c)
    for (int ky = 0; ky < k; ++ky)
      for (int kx = 0; kx < k; ++kx) {
        const double* row = cols.row((c * k + ky) * k + kx).data();
        const int dy = ky - r, dx = kx - r;
        for (int y = 0; y < H; ++y) {
          const int sy = y + dy;
          if (sy < 0 || sy >= H) continue;
          double* dst = gx.v.data() + (static_cast<std::size_t>(c) * H + sy) * W;
          const int x0 = std::max(0, -dx), x1 = std::min(W, W - dx);
          for (int xx = x0; xx < x1; ++xx) dst[xx + dx] += row[y * W + xx];
        }
      }
}

}  // namespace

void Param::zero_grad() {
  if (!grad.same_shape(value)) grad = Tensor(value.c, value.h, value.w);
  else std::fill(grad.v.begin(), grad.v.end(), 0.0);
}

Param conv_weight(const std::string& name, int cout, int cin, int k, Rng& rng, double gain) {
  Tensor w(cout, cin, k * k);
  const double bound = gain * std::sqrt(6.0 / (cin * k * k));
  for (double& v : w.v) v = rng.uniform(-bound, bound);
  return Param(name, std::move(w));
}

Param zeros(const std::string& name, int c, int h, int w) { return Param(name, Tensor(c, h, w)); }

Graph::Id Graph::constant(Tensor t) {
  nodes_.push_back(Node{std::move(t), {}, false, false, nullptr, {}});
  return static_cast<Id>(nodes_.size() - 1);
}

Graph::Id Graph::variable(Tensor t) {
  nodes_.push_back(Node{std::move(t), {}, true, true, nullptr, {}});
  return static_cast<Id>(nodes_.size() - 1);
}

Graph::Id Graph::param(Param& p) {
  nodes_.push_back(Node{p.value, {}, p.trainable, false, p.trainable ? &p : nullptr, {}});
  return static_cast<Id>(nodes_.size() - 1);
}

Graph::Id Graph::frozen(const Param& p) { return constant(p.value); }

Tensor Graph::grad(Id id) const {
  const auto& n = nodes_[id];
  if (n.grad.same_shape(n.value) && !n.grad.v.empty()) return n.grad;
  return Tensor(n.value.c, n.value.h, n.value.w);
}

Tensor& Graph::acc(Id id) {
  auto& n = nodes_[id];
  if (!n.grad.same_shape(n.value) || n.grad.v.size() != n.value.v.size())
    n.grad = Tensor(n.value.c, n.value.h, n.value.w);
  return n.grad;
}

Graph::Id Graph::push(Tensor value, std::initializer_list<Id> inputs, BackFn fn) {
  return push(std::move(value), std::vector<Id>(inputs), std::move(fn));
}

Graph::Id Graph::push(Tensor value, const std::vector<Id>& inputs, BackFn fn) {
  bool tracked = false;
  for (Id i : inputs) tracked = tracked || nodes_[i].tracked;
  nodes_.push_back(Node{std::move(value), {}, tracked, false, nullptr, tracked ? std::move(fn) : BackFn{}});
  return static_cast<Id>(nodes_.size() - 1);
}

void Graph::backward(Id root) {
  if (nodes_[root].value.size() != 1) throw ContractError("backward root must be a scalar");
  if (!nodes_[root].tracked) return;
  acc(root).v[0] = 1.0;
  for (Id i = root; i >= 0; --i) {
    auto& n = nodes_[i];
    if (!n.tracked || n.grad.v.empty()) continue;
    if (n.back) n.back(n.grad);
    if (n.param) {
      auto& p = *n.param;
      if (!p.grad.same_shape(p.value)) p.grad = Tensor(p.value.c, p.value.h, p.value.w);
      for (std::size_t k = 0; k < p.grad.v.size(); ++k) p.grad.v[k] += n.grad.v[k];
    }
    if (!n.keep_grad && i != root) {
      n.grad.v.clear();
      n.grad.v.shrink_to_fit();
    }
  }
}

Graph::Id Graph::conv2d(Id x, Id w, std::optional<Id> b, int k) {
  const Tensor& X = value(x);
  const Tensor& Wt = value(w);
  const int cout = Wt.c;
  if (Wt.h != X.c || Wt.w != k * k)
    throw DimensionError("conv2d: weight " + shape_str(Wt) + " incompatible with input " + shape_str(X));
  const Eigen::Index hw = static_cast<Eigen::Index>(X.h) * X.w;
  auto cols = std::make_shared<RMat>();
  if (k == 1) *cols = CMapR(X.v.data(), X.c, hw);
  else im2col(X, k, *cols);
  Tensor out(cout, X.h, X.w);
  CMapR wm(Wt.v.data(), cout, static_cast<Eigen::Index>(X.c) * k * k);
  MapR om(out.v.data(), cout, hw);
  om.noalias() = wm * (*cols);
  if (b) {
    const Tensor& B = value(*b);
    for (int c = 0; c < cout; ++c) om.row(c).array() += B.v[c];
  }
  const int cin = X.c, H = X.h, W = X.w;
  std::vector<Id> ins{x, w};
  if (b) ins.push_back(*b);
  return push(std::move(out), ins, [this, x, w, b, cols, cout, cin, H, W, k, hw](const Tensor& g) {
    CMapR gm(g.v.data(), cout, hw);
    if (tracked(w)) {
      Tensor& gw = acc(w);
      MapR gwm(gw.v.data(), cout, static_cast<Eigen::Index>(cin) * k * k);
      gwm.noalias() += gm * cols->transpose();
    }
    if (b && tracked(*b)) {
      Tensor& gb = acc(*b);
      for (int c = 0; c < cout; ++c) gb.v[c] += gm.row(c).sum();
    }
    if (tracked(x)) {
      CMapR wm2(value(w).v.data(), cout, static_cast<Eigen::Index>(cin) * k * k);
      Tensor& gx = acc(x);
      if (k == 1) {
        MapR gxm(gx.v.data(), cin, hw);
        gxm.noalias() += wm2.transpose() * gm;
      } else {
        RMat gcols = wm2.transpose() * gm;
        col2im_add(gcols, k, gx);
      }
    }
    (void)H;
    (void)W;
  });
}

Graph::Id Graph::add(Id a, Id b) {
  const Tensor& A = value(a);
  const Tensor& B = value(b);
  if (!A.same_shape(B)) throw DimensionError("add: " + shape_str(A) + " vs " + shape_str(B));
  Tensor out = A;
  for (std::size_t i = 0; i < out.v.size(); ++i) out.v[i] += B.v[i];
  return push(std::move(out), {a, b}, [this, a, b](const Tensor& g) {
    for (Id id : {a, b})
      if (tracked(id)) {
        Tensor& t = acc(id);
        for (std::size_t i = 0; i < g.v.size(); ++i) t.v[i] += g.v[i];
      }
  });
}

Graph::Id Graph::sub(Id a, Id b) {
  const Tensor& A = value(a);
  const Tensor& B = value(b);
  if (!A.same_shape(B)) throw DimensionError("sub: " + shape_str(A) + " vs " + shape_str(B));
  Tensor out = A;
  for (std::size_t i = 0; i < out.v.size(); ++i) out.v[i] -= B.v[i];
  return push(std::move(out), {a, b}, [this, a, b](const Tensor& g) {
    if (tracked(a)) {
      Tensor& t = acc(a);
      for (std::size_t i = 0; i < g.v.size(); ++i) t.v[i] += g.v[i];
    }
    if (tracked(b)) {
      Tensor& t = acc(b);
      for (std::size_t i = 0; i < g.v.size(); ++i) t.v[i] -= g.v[i];
    }
  });
}

Graph::Id Graph::mul(Id a, Id b) {
  const Tensor& A = value(a);
  const Tensor& B = value(b);
  if (!A.same_shape(B)) throw DimensionError("mul: " + shape_str(A) + " vs " + shape_str(B));
  Tensor out = A;
  for (std::size_t i = 0; i < out.v.size(); ++i) out.v[i] *= B.v[i];
  return push(std::move(out), {a, b}, [this, a, b](const Tensor& g) {
    if (tracked(a)) {
      Tensor& t = acc(a);
      const Tensor& B2 = value(b);
      for (std::size_t i = 0; i < g.v.size(); ++i) t.v[i] += g.v[i] * B2.v[i];
    }
    if (tracked(b)) {
      Tensor& t = acc(b);
      const Tensor& A2 = value(a);
      for (std::size_t i = 0; i < g.v.size(); ++i) t.v[i] += g.v[i] * A2.v[i];
    }
  });
}

Graph::Id Graph::scale(Id a, double s) {
  Tensor out = value(a);
  for (double& v : out.v) v *= s;
  return push(std::move(out), {a}, [this, a, s](const Tensor& g) {
    Tensor& t = acc(a);
    for (std::size_t i = 0; i < g.v.size(); ++i) t.v[i] += s * g.v[i];
  });
}

Graph::Id Graph::add_scalar(Id a, double s) {
  Tensor out = value(a);
  for (double& v : out.v) v += s;
  return push(std::move(out), {a}, [this, a](const Tensor& g) {
    Tensor& t = acc(a);
    for (std::size_t i = 0; i < g.v.size(); ++i) t.v[i] += g.v[i];
  });
}

Graph::Id Graph::lrelu(Id a, double slope) {
  Tensor out = value(a);
  for (double& v : out.v)
    if (v < 0.0) v *= slope;
  return push(std::move(out), {a}, [this, a, slope](const Tensor& g) {
    Tensor& t = acc(a);
    const Tensor& A = value(a);
    for (std::size_t i = 0; i < g.v.size(); ++i) t.v[i] += A.v[i] < 0.0 ? slope * g.v[i] : g.v[i];
  });
}

Graph::Id Graph::tanh(Id a) {
  Tensor out = value(a);
  for (double& v : out.v) v = std::tanh(v);
  const Id id = push(out, {a}, {});
  if (tracked(id)) {
    nodes_[id].back = [this, a, id](const Tensor& g) {
      Tensor& t = acc(a);
      const Tensor& Y = value(id);
      for (std::size_t i = 0; i < g.v.size(); ++i) t.v[i] += g.v[i] * (1.0 - Y.v[i] * Y.v[i]);
    };
  }
  return id;
}

Graph::Id Graph::film(Id x, Id gb) {
  const Tensor& X = value(x);
  const Tensor& GB = value(gb);
  if (GB.size() != static_cast<std::size_t>(2 * X.c))
    throw DimensionError("film: modulation size " + std::to_string(GB.size()) + " for " + std::to_string(X.c) +
                         " channels");
  Tensor out = X;
  const std::size_t plane = X.plane();
  for (int c = 0; c < X.c; ++c) {
    const double gm = 1.0 + GB.v[c], bt = GB.v[X.c + c];
    for (std::size_t i = 0; i < plane; ++i) out.v[c * plane + i] = out.v[c * plane + i] * gm + bt;
  }
  return push(std::move(out), {x, gb}, [this, x, gb, plane](const Tensor& g) {
    const Tensor& X2 = value(x);
    const Tensor& GB2 = value(gb);
    const int C = X2.c;
    if (tracked(x)) {
      Tensor& t = acc(x);
      for (int c = 0; c < C; ++c) {
        const double gm = 1.0 + GB2.v[c];
        for (std::size_t i = 0; i < plane; ++i) t.v[c * plane + i] += gm * g.v[c * plane + i];
      }
    }
    if (tracked(gb)) {
      Tensor& t = acc(gb);
      for (int c = 0; c < C; ++c) {
        double sg = 0.0, sb = 0.0;
        for (std::size_t i = 0; i < plane; ++i) {
          sg += g.v[c * plane + i] * X2.v[c * plane + i];
          sb += g.v[c * plane + i];
        }
        t.v[c] += sg;
        t.v[C + c] += sb;
      }
    }
  });
}

Graph::Id Graph::avgpool2(Id x) {
  const Tensor& X = value(x);
  const int Ho = (X.h + 1) / 2, Wo = (X.w + 1) / 2;
  Tensor out(X.c, Ho, Wo);
  for (int c = 0; c < X.c; ++c)
    for (int y = 0; y < Ho; ++y)
      for (int xx = 0; xx < Wo; ++xx) {
        double s = 0.0;
        int n = 0;
        for (int dy = 0; dy < 2; ++dy)
          for (int dx = 0; dx < 2; ++dx) {
            const int sy = 2 * y + dy, sx = 2 * xx + dx;
            if (sy < X.h && sx < X.w) {
              s += X.at(c, sy, sx);
              ++n;
            }
          }
        out.at(c, y, xx) = s / n;
      }
  return push(std::move(out), {x}, [this, x, Ho, Wo](const Tensor& g) {
    Tensor& t = acc(x);
    for (int c = 0; c < t.c; ++c)
      for (int y = 0; y < Ho; ++y)
        for (int xx = 0; xx < Wo; ++xx) {
          const int ny = std::min(2, t.h - 2 * y), nx = std::min(2, t.w - 2 * xx);
          const double share = g.at(c, y, xx) / (ny * nx);
          for (int dy = 0; dy < ny; ++dy)
            for (int dx = 0; dx < nx; ++dx) t.at(c, 2 * y + dy, 2 * xx + dx) += share;
        }
  });
}

Graph::Id Graph::upsample_nearest(Id x, int h, int w) {
  const Tensor& X = value(x);
  Tensor out(X.c, h, w);
  for (int c = 0; c < X.c; ++c)
    for (int y = 0; y < h; ++y)
      for (int xx = 0; xx < w; ++xx) out.at(c, y, xx) = X.at(c, std::min(y / 2, X.h - 1), std::min(xx / 2, X.w - 1));
  return push(std::move(out), {x}, [this, x, h, w](const Tensor& g) {
    Tensor& t = acc(x);
    for (int c = 0; c < t.c; ++c)
      for (int y = 0; y < h; ++y)
        for (int xx = 0; xx < w; ++xx)
          t.at(c, std::min(y / 2, t.h - 1), std::min(xx / 2, t.w - 1)) += g.at(c, y, xx);
  });
}

Graph::Id Graph::concat(const std::vector<Id>& xs) {
  if (xs.empty()) throw DimensionError("concat of nothing");
  const int H = value(xs[0]).h, W = value(xs[0]).w;
  int C = 0;
  for (Id id : xs) {
    if (value(id).h != H || value(id).w != W) throw DimensionError("concat: spatial shape mismatch");
    C += value(id).c;
  }
  Tensor out(C, H, W);
  std::size_t off = 0;
  for (Id id : xs) {
    const auto& v = value(id).v;
    std::copy(v.begin(), v.end(), out.v.begin() + static_cast<std::ptrdiff_t>(off));
    off += v.size();
  }
  return push(std::move(out), xs, [this, xs](const Tensor& g) {
    std::size_t o = 0;
    for (Id id : xs) {
      const std::size_t n = value(id).size();
      if (tracked(id)) {
        Tensor& t = acc(id);
        for (std::size_t i = 0; i < n; ++i) t.v[i] += g.v[o + i];
      }
      o += n;
    }
  });
}

Graph::Id Graph::channel(Id x, int c) {
  const Tensor& X = value(x);
  if (c < 0 || c >= X.c) throw DimensionError("channel index out of range");
  Tensor out(1, X.h, X.w);
  auto src = X.channel(c);
  std::copy(src.begin(), src.end(), out.v.begin());
  return push(std::move(out), {x}, [this, x, c](const Tensor& g) {
    auto dst = acc(x).channel(c);
    for (std::size_t i = 0; i < dst.size(); ++i) dst[i] += g.v[i];
  });
}

Graph::Id Graph::reshape(Id x, int c, int h, int w) {
  Tensor out = value(x);
  if (static_cast<std::size_t>(c) * h * w != out.size()) throw DimensionError("reshape: element count mismatch");
  out.c = c;
  out.h = h;
  out.w = w;
  return push(std::move(out), {x}, [this, x](const Tensor& g) {
    Tensor& t = acc(x);
    for (std::size_t i = 0; i < g.v.size(); ++i) t.v[i] += g.v[i];
  });
}

Graph::Id Graph::detach(Id x) { return constant(value(x)); }

Graph::Id Graph::mean(Id x) {
  const Tensor& X = value(x);
  double s = 0.0;
  for (double v : X.v) s += v;
  const double n = static_cast<double>(X.size());
  Tensor out(1, 1, 1, s / n);
  return push(std::move(out), {x}, [this, x, n](const Tensor& g) {
    Tensor& t = acc(x);
    for (double& v : t.v) v += g.v[0] / n;
  });
}

Graph::Id Graph::weighted_sum(const std::vector<std::pair<double, Id>>& terms) {
  double s = 0.0;
  std::vector<Id> ins;
  for (const auto& [wgt, id] : terms) {
    s += wgt * scalar(id);
    ins.push_back(id);
  }
  return push(Tensor(1, 1, 1, s), ins, [this, terms](const Tensor& g) {
    for (const auto& [wgt, id] : terms)
      if (tracked(id)) acc(id).v[0] += wgt * g.v[0];
  });
}

void Adam::step(const std::vector<Param*>& params) {
  for (Param* p : params) {
    if (!p->trainable) continue;
    if (!p->grad.same_shape(p->value)) p->zero_grad();
    auto& st = states_[p->name];
    if (!st.m.same_shape(p->value)) {
      st.m = Tensor(p->value.c, p->value.h, p->value.w);
      st.v = st.m;
      st.vmax = st.m;
    }
    ++st.step;
    const double bc1 = 1.0 - std::pow(cfg_.beta1, static_cast<double>(st.step));
    const double bc2 = 1.0 - std::pow(cfg_.beta2, static_cast<double>(st.step));
    for (std::size_t i = 0; i < p->value.v.size(); ++i) {
      const double g = p->grad.v[i] + cfg_.weight_decay * p->value.v[i];
      st.m.v[i] = cfg_.beta1 * st.m.v[i] + (1.0 - cfg_.beta1) * g;
      st.v.v[i] = cfg_.beta2 * st.v.v[i] + (1.0 - cfg_.beta2) * g * g;
      double vhat = st.v.v[i];
      if (cfg_.amsgrad) {
        st.vmax.v[i] = std::max(st.vmax.v[i], st.v.v[i]);
        vhat = st.vmax.v[i];
      }
      const double denom = std::sqrt(vhat / bc2) + cfg_.eps;
      p->value.v[i] -= cfg_.lr * (st.m.v[i] / bc1) / denom;
    }
  }
}

double clip_grad_norm(const std::vector<Param*>& params, double max_norm) {
  double ss = 0.0;
  for (const Param* p : params)
    for (double g : p->grad.v) ss += g * g;
  const double norm = std::sqrt(ss);
  if (max_norm > 0.0 && norm > max_norm) {
    const double f = max_norm / (norm + 1e-12);
    for (Param* p : params)
      for (double& g : p->grad.v) g *= f;
  }
  return norm;
}

}  // namespace vtcd::nn
