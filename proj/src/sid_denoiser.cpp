#include "vtcd/sid_denoiser.hpp"

#include <algorithm>
#include <cmath>

#include <Eigen/Dense>

#include "vtcd/error.hpp"

namespace vtcd {

namespace {

constexpr double kRidge = 1e-2;
constexpr int kNewtonIters = 100;

void require_dim(std::size_t a, std::size_t b, const char* what) {
  if (a != b)
    throw DimensionError(std::string(what) + ": dimension " + std::to_string(a) + " vs hyperplane " +
                         std::to_string(b));
}

}  // namespace

void EditConfig::validate() const {
  if (!std::isfinite(lambda)) throw ValidationError("edit lambda must be finite");
  if (t_lo > t_hi) throw ValidationError("edit apply range needs t_lo <= t_hi");
}

Hyperplane fit_hyperplane(const std::vector<std::vector<double>>& low_noise,
                          const std::vector<std::vector<double>>& high_noise) {
  if (low_noise.size() < 2 || high_noise.size() < 2)
    throw ValidationError("fit_hyperplane needs at least 2 samples per class");
  const std::size_t dim = low_noise.front().size();
  if (dim == 0) throw DimensionError("fit_hyperplane: empty latent vectors");
  for (const auto* cls : {&low_noise, &high_noise})
    for (const auto& v : *cls)
      if (v.size() != dim) throw DimensionError("fit_hyperplane: latent vectors differ in dimension");

  const auto& ref = low_noise.front();
  bool all_same = true;
  for (const auto* cls : {&low_noise, &high_noise})
    for (const auto& v : *cls) all_same = all_same && v == ref;
  if (all_same) throw DegeneracyError("all latents are identical; no separating direction exists");

  const Eigen::Index n = static_cast<Eigen::Index>(low_noise.size() + high_noise.size());
  const Eigen::Index d = static_cast<Eigen::Index>(dim);
  Eigen::MatrixXd X(n, d + 1);
  Eigen::VectorXd y(n);
  Eigen::Index r = 0;
  for (const auto& v : low_noise) {
    for (Eigen::Index k = 0; k < d; ++k) X(r, k) = v[k];
    X(r, d) = 1.0;
    y(r++) = 1.0;
  }
  for (const auto& v : high_noise) {
    for (Eigen::Index k = 0; k < d; ++k) X(r, k) = v[k];
    X(r, d) = 1.0;
    y(r++) = 0.0;
  }

  Eigen::VectorXd w = Eigen::VectorXd::Zero(d + 1);
  Eigen::VectorXd reg = Eigen::VectorXd::Constant(d + 1, kRidge);
  reg(d) = 1e-8;
  for (int it = 0; it < kNewtonIters; ++it) {
    const Eigen::VectorXd z = X * w;
    const Eigen::VectorXd p = z.unaryExpr([](double s) { return 1.0 / (1.0 + std::exp(-s)); });
    const Eigen::VectorXd s = p.unaryExpr([](double q) { return std::max(q * (1.0 - q), 1e-12); });
    const Eigen::VectorXd grad = X.transpose() * (p - y) + reg.cwiseProduct(w);
    Eigen::MatrixXd H = X.transpose() * s.asDiagonal() * X;
    H.diagonal() += reg;
    const Eigen::VectorXd step = H.ldlt().solve(grad);
    w -= step;
    if (step.norm() < 1e-10 * (1.0 + w.norm())) break;
  }

  Eigen::VectorXd wn = w.head(d);
  const double norm = wn.norm();
  if (!(norm > 1e-12) || !std::isfinite(norm)) throw DegeneracyError("classifier weights vanished; classes are inseparable");

  Hyperplane h;
  h.n.resize(dim);
  for (Eigen::Index k = 0; k < d; ++k) h.n[k] = wn(k) / norm;

  double mean_low = 0.0, mean_high = 0.0;
  for (const auto& v : low_noise) mean_low += semantic_distance(v, h);
  for (const auto& v : high_noise) mean_high += semantic_distance(v, h);
  mean_low /= static_cast<double>(low_noise.size());
  mean_high /= static_cast<double>(high_noise.size());
  if (mean_low == mean_high) throw DegeneracyError("class means coincide along the fitted normal");
  h.orientation = 1;
  if (mean_low < mean_high) {
    for (double& v : h.n) v = -v;
    h.orientation = -1;
  }

  int correct = 0;
  for (Eigen::Index i = 0; i < n; ++i) {
    const double score = X.row(i).dot(w);
    correct += (score > 0.0) == (y(i) > 0.5) ? 1 : 0;
  }
  h.fit_accuracy = static_cast<double>(correct) / static_cast<double>(n);
  return h;
}

double semantic_distance(std::span<const double> x, const Hyperplane& h) {
  require_dim(x.size(), h.n.size(), "semantic_distance");
  double s = 0.0;
  for (std::size_t i = 0; i < x.size(); ++i) s += h.n[i] * x[i];
  return s;
}

std::vector<double> edit_latent(std::span<const double> x, const Hyperplane& h, const EditConfig& cfg) {
  require_dim(x.size(), h.n.size(), "edit_latent");
  std::vector<double> out(x.begin(), x.end());
  if (cfg.lambda == 0.0) return out;
  const double d = semantic_distance(x, h);
  for (std::size_t i = 0; i < out.size(); ++i) out[i] += cfg.lambda * d * h.n[i];
  return out;
}

Tensor step_embedding(int t, int dim) {
  Tensor e(dim, 1, 1);
  const int half = dim / 2;
  for (int i = 0; i < half; ++i) {
    const double f = std::exp(-std::log(1000.0) * i / std::max(1, half));
    e.v[i] = std::sin(t * f);
    e.v[half + i] = std::cos(t * f);
  }
  return e;
}

DenoiserModel::DenoiserModel(DenoiserWidths w, std::uint64_t seed) : widths_(w) {
  if (w.c1 < 1 || w.c2 < 1 || w.temb < 2) throw ConfigError("denoiser widths must be positive");
  Rng rng(seed);
  w_in_ = nn::conv_weight("dn.in.w", w.c1, 3, 3, rng);
  b_in_ = nn::zeros("dn.in.b", w.c1);
  w_f1_ = nn::zeros("dn.film1.w", 2 * w.c1, w.temb, 1);
  b_f1_ = nn::zeros("dn.film1.b", 2 * w.c1);
  w_e2_ = nn::conv_weight("dn.e2.w", w.c1, w.c1, 3, rng);
  b_e2_ = nn::zeros("dn.e2.b", w.c1);
  w_m1_ = nn::conv_weight("dn.m1.w", w.c2, w.c1, 3, rng);
  b_m1_ = nn::zeros("dn.m1.b", w.c2);
  w_f2_ = nn::zeros("dn.film2.w", 2 * w.c2, w.temb, 1);
  b_f2_ = nn::zeros("dn.film2.b", 2 * w.c2);
  w_m2_ = nn::conv_weight("dn.m2.w", w.c2, w.c2, 3, rng);
  b_m2_ = nn::zeros("dn.m2.b", w.c2);
  w_d1_ = nn::conv_weight("dn.d1.w", w.c1, w.c1 + w.c2, 3, rng);
  b_d1_ = nn::zeros("dn.d1.b", w.c1);
  w_out_ = nn::zeros("dn.out.w", 1, w.c1, 9);
}

std::vector<nn::Param*> DenoiserModel::params() {
  return {&w_in_, &b_in_, &w_f1_, &b_f1_, &w_e2_, &b_e2_, &w_m1_, &b_m1_,
          &w_f2_, &b_f2_, &w_m2_, &b_m2_, &w_d1_, &b_d1_, &w_out_};
}

std::vector<const nn::Param*> DenoiserModel::params() const {
  auto ps = const_cast<DenoiserModel*>(this)->params();
  return {ps.begin(), ps.end()};
}

DenoiserModel::Nodes DenoiserModel::forward(nn::Graph& g, nn::Graph::Id x_scaled, nn::Graph::Id cond,
                                            nn::Graph::Id prev, int t, bool track, const Hyperplane* h,
                                            const EditConfig* edit) {
  const int H = g.value(x_scaled).h, W = g.value(x_scaled).w;
  const auto emb = g.constant(step_embedding(t, widths_.temb));
  const auto inp = g.concat({x_scaled, cond, prev});
  auto h0 = g.conv2d(inp, p(g, w_in_, track), p(g, b_in_, track), 3);
  h0 = g.lrelu(g.film(h0, g.conv2d(emb, p(g, w_f1_, track), p(g, b_f1_, track), 1)));
  const auto e2 = g.lrelu(g.conv2d(h0, p(g, w_e2_, track), p(g, b_e2_, track), 3));
  auto m = g.conv2d(g.avgpool2(e2), p(g, w_m1_, track), p(g, b_m1_, track), 3);
  m = g.lrelu(g.film(m, g.conv2d(emb, p(g, w_f2_, track), p(g, b_f2_, track), 1)));
  auto lat = g.lrelu(g.conv2d(m, p(g, w_m2_, track), p(g, b_m2_, track), 3));

  Nodes out;
  const Tensor& L = g.value(lat);
  out.pooled.assign(L.c, 0.0);
  for (int c = 0; c < L.c; ++c) {
    double s = 0.0;
    for (double v : L.channel(c)) s += v;
    out.pooled[c] = s / static_cast<double>(L.plane());
  }
  if (h && edit && edit->active_at(t)) {
    require_dim(out.pooled.size(), h->n.size(), "latent edit");
    const double d = semantic_distance(out.pooled, *h);
    Tensor shift(L.c, L.h, L.w);
    for (int c = 0; c < L.c; ++c) {
      const double delta = edit->lambda * d * h->n[c];
      for (double& v : shift.channel(c)) v = delta;
    }
    lat = g.add(lat, g.constant(std::move(shift)));
  }
  out.latent = lat;

  const auto up = g.upsample_nearest(lat, H, W);
  const auto d1 = g.lrelu(g.conv2d(g.concat({up, e2}), p(g, w_d1_, track), p(g, b_d1_, track), 3));
  out.noise = g.conv2d(d1, p(g, w_out_, track), std::nullopt, 3);
  return out;
}

namespace {

Tensor scaled_input(const Tensor& x_t, int t, const NoiseSchedule& sched) {
  Tensor xs = x_t;
  const double inv = 1.0 / std::sqrt(sched.alphas_bar[t]);
  for (double& v : xs.v) v *= inv;
  return xs;
}

void check_condition(const Tensor& x, const SliceCondition& cond) {
  if (!cond.slice.same_shape(x) || !cond.previous.same_shape(x))
    throw DimensionError("condition slices must match the state shape");
}

}  // namespace

Tensor DenoiserModel::predict_eps(const Tensor& x_t, int t, const SliceCondition& cond, const NoiseSchedule& sched,
                                  const Hyperplane* h, const EditConfig* edit) {
  if (t < 1 || t > sched.T) throw ValidationError("predict_eps needs 1 <= t <= T");
  check_condition(x_t, cond);
  nn::Graph g;
  const auto xs = g.constant(scaled_input(x_t, t, sched));
  const auto nodes = forward(g, xs, g.constant(cond.slice), g.constant(cond.previous), t, false, h, edit);
  Tensor eps = g.value(nodes.noise);
  const double inv = 1.0 / sched.noise_to_signal(t);
  for (double& v : eps.v) v *= inv;
  return eps;
}

std::vector<double> DenoiserModel::pooled_latent(const Tensor& x_t, int t, const SliceCondition& cond,
                                                 const NoiseSchedule& sched) {
  check_condition(x_t, cond);
  nn::Graph g;
  const auto xs = g.constant(scaled_input(x_t, t, sched));
  return forward(g, xs, g.constant(cond.slice), g.constant(cond.previous), t, false).pooled;
}

DiffusionState guided_reverse_step(const DiffusionState& state, const SliceCondition& cond, DenoiserModel& model,
                                   const Hyperplane* h, const EditConfig& cfg, const NoiseSchedule& sched,
                                   const Tensor& z) {
  if (state.t < 1) throw ValidationError("guided_reverse_step needs t >= 1");
  const bool edit = h != nullptr && cfg.active_at(state.t);
  const Tensor eps = model.predict_eps(state.x, state.t, cond, sched, edit ? h : nullptr, edit ? &cfg : nullptr);
  DiffusionState next;
  next.x = reverse_step(state.x, eps, state.t, sched, z);
  next.t = state.t - 1;
  next.z = z;
  return next;
}

Tensor guided_reverse_chain(const Tensor& x_start, int t_start, const SliceCondition& cond, DenoiserModel& model,
                            const Hyperplane* h, const EditConfig& cfg, const NoiseSchedule& sched, Rng& rng) {
  DiffusionState st{x_start, t_start, std::nullopt};
  while (st.t >= 1) {
    const Tensor z = draw_noise(st.x, rng);
    st = guided_reverse_step(st, cond, model, h, cfg, sched, z);
  }
  return st.x;
}

Volume3D denoise_volume(const Volume3D& vol, DenoiserModel& model, const Hyperplane* h, const EditConfig& cfg,
                        const NoiseSchedule& sched, std::uint64_t seed) {
  vol.validate();
  cfg.validate();
  const auto& d = vol.dims();
  Volume3D out = vol;
  Rng rng(seed);
  const auto lo = vol.range().lo, hi = vol.range().hi;
  Tensor prev;
  for (int z = 0; z < d.c; ++z) {
    const Tensor y = slice_tensor(xy_slice(vol, z));
    const int t = step_for_index(z, d.c, sched.T);
    if (t > 0) {
      Tensor x = y;
      const double a = std::sqrt(sched.alphas_bar[t]);
      for (double& v : x.v) v *= a;
      const SliceCondition cond{y, z > 0 ? prev : y};
      x = guided_reverse_chain(x, t, cond, model, h, cfg, sched, rng);
      auto dst = out.data().subspan(static_cast<std::size_t>(z) * d.h * d.w, static_cast<std::size_t>(d.h) * d.w);
      for (std::size_t i = 0; i < dst.size(); ++i) dst[i] = static_cast<float>(std::clamp(x.v[i], lo, hi));
    }
    prev = slice_tensor(xy_slice(out, z));
  }
  return out;
}

std::pair<std::vector<std::vector<double>>, std::vector<std::vector<double>>> collect_latents(
    DenoiserModel& model, const std::vector<Volume3D>& volumes, const NoiseSchedule& sched) {
  std::vector<std::vector<double>> low, high;
  for (const auto& vol : volumes) {
    const int C = vol.dims().c;
    const int q = std::max(1, C / 4);
    for (int z = 0; z < C; ++z) {
      const bool is_low = z < q, is_high = z >= C - q;
      if (!is_low && !is_high) continue;
      const Tensor y = slice_tensor(xy_slice(vol, z));
      const Tensor prev = z > 0 ? slice_tensor(xy_slice(vol, z - 1)) : y;
      const int t = std::max(1, step_for_index(z, C, sched.T));
      Tensor x = y;
      const double a = std::sqrt(sched.alphas_bar[t]);
      for (double& v : x.v) v *= a;
      auto lat = model.pooled_latent(x, t, SliceCondition{y, prev}, sched);
      if (is_low) low.push_back(lat);
      if (is_high) high.push_back(std::move(lat));
    }
  }
  return {std::move(low), std::move(high)};
}

nlohmann::json to_json(const Hyperplane& h) {
  return {{"n", h.n}, {"fit_accuracy", h.fit_accuracy}, {"orientation", h.orientation}};
}

Hyperplane hyperplane_from_json(const nlohmann::json& j) {
  Hyperplane h;
  h.n = j.at("n").get<std::vector<double>>();
  h.fit_accuracy = j.at("fit_accuracy").get<double>();
  h.orientation = j.at("orientation").get<int>();
  return h;
}

}  // namespace vtcd
