#include "vtcd/losses.hpp"

#include <cmath>

#include "vtcd/error.hpp"

namespace vtcd {

namespace {

void require_same(const Tensor& a, const Tensor& b, const char* what) {
  if (!a.same_shape(b)) throw DimensionError(std::string(what) + ": input shapes differ");
}

void check_grad_span(std::span<double> g, std::size_t n, const char* what) {
  if (!g.empty() && g.size() != n) throw DimensionError(std::string(what) + ": gradient buffer size mismatch");
}

double mean_abs(std::span<const double> a, std::span<const double> b, std::span<double> ga, std::span<double> gb) {
  const double n = static_cast<double>(a.size());
  double s = 0.0;
  for (std::size_t i = 0; i < a.size(); ++i) {
    const double d = a[i] - b[i];
    s += std::abs(d);
    const double sg = d > 0.0 ? 1.0 : (d < 0.0 ? -1.0 : 0.0);
    if (!ga.empty()) ga[i] = sg / n;
    if (!gb.empty()) gb[i] = -sg / n;
  }
  return s / n;
}

double tv_value(const Tensor& img, double* g) {
  if (img.h < 2 || img.w < 2) throw DimensionError("tv_loss needs h >= 2 and w >= 2");
  const double norm = static_cast<double>(img.h) * img.w * img.c;
  double s = 0.0;
  for (int k = 0; k < img.c; ++k)
    for (int i = 0; i < img.h - 1; ++i)
      for (int j = 0; j < img.w - 1; ++j) {
        const double c = img.at(k, i, j);
        const double dj = img.at(k, i, j + 1) - c;
        const double di = img.at(k, i + 1, j) - c;
        const double m = std::sqrt(dj * dj + di * di);
        s += m;
        if (g && m > 0.0) {
          const std::size_t base = (static_cast<std::size_t>(k) * img.h + i) * img.w + j;
          g[base] -= (dj + di) / (m * norm);
          g[base + 1] += dj / (m * norm);
          g[base + img.w] += di / (m * norm);
        }
      }
  return s / norm;
}

}  // namespace

std::string_view to_string(Phase p) {
  switch (p) {
    case Phase::Denoise: return "DENOISE";
    case Phase::Sr: return "SR";
    case Phase::Joint: return "JOINT";
  }
  return "?";
}

Phase parse_phase(std::string_view s) {
  if (s == "DENOISE") return Phase::Denoise;
  if (s == "SR") return Phase::Sr;
  if (s == "JOINT") return Phase::Joint;
  throw ConfigError("unknown phase '" + std::string(s) + "'");
}

void LossWeights::validate() const {
  auto ok = [](double w) { return std::isfinite(w) && w >= 0.0; };
  if (!ok(w_adv) || !ok(w_cyc) || !ok(w_id) || !ok(w_tv) || !ok(w_content) || !ok(w_diff))
    throw ConfigError("loss weights must be finite and >= 0");
  for (const auto& [phase, o] : phase_schedule)
    for (const auto& w : {o.w_adv, o.w_cyc, o.w_id, o.w_tv, o.w_content, o.w_diff})
      if (w && !ok(*w)) throw ConfigError("loss weight override must be finite and >= 0");
}

LossWeights LossWeights::active(Phase p) const {
  LossWeights out = *this;
  out.phase_schedule.clear();
  const auto it = phase_schedule.find(p);
  if (it == phase_schedule.end()) return out;
  const auto& o = it->second;
  if (o.w_adv) out.w_adv = *o.w_adv;
  if (o.w_cyc) out.w_cyc = *o.w_cyc;
  if (o.w_id) out.w_id = *o.w_id;
  if (o.w_tv) out.w_tv = *o.w_tv;
  if (o.w_content) out.w_content = *o.w_content;
  if (o.w_diff) out.w_diff = *o.w_diff;
  return out;
}

double adversarial_d(std::span<const double> d_real, std::span<const double> d_fake, std::span<double> g_real,
                     std::span<double> g_fake) {
  check_grad_span(g_real, d_real.size(), "adversarial_d");
  check_grad_span(g_fake, d_fake.size(), "adversarial_d");
  const double nr = static_cast<double>(d_real.size()), nf = static_cast<double>(d_fake.size());
  double sr = 0.0, sf = 0.0;
  for (std::size_t i = 0; i < d_real.size(); ++i) {
    sr += (d_real[i] - 1.0) * (d_real[i] - 1.0);
    if (!g_real.empty()) g_real[i] = 2.0 * (d_real[i] - 1.0) / nr;
  }
  for (std::size_t i = 0; i < d_fake.size(); ++i) {
    sf += d_fake[i] * d_fake[i];
    if (!g_fake.empty()) g_fake[i] = 2.0 * d_fake[i] / nf;
  }
  return sr / nr + sf / nf;
}

double adversarial_g(std::span<const double> d_fake, std::span<double> g_fake) {
  check_grad_span(g_fake, d_fake.size(), "adversarial_g");
  const double n = static_cast<double>(d_fake.size());
  double s = 0.0;
  for (std::size_t i = 0; i < d_fake.size(); ++i) {
    s += (d_fake[i] - 1.0) * (d_fake[i] - 1.0);
    if (!g_fake.empty()) g_fake[i] = 2.0 * (d_fake[i] - 1.0) / n;
  }
  return s / n;
}

double cycle_consistency(const Tensor& x, const Tensor& x_rec, std::span<double> g_x, std::span<double> g_rec) {
  require_same(x, x_rec, "cycle_consistency");
  check_grad_span(g_x, x.size(), "cycle_consistency");
  check_grad_span(g_rec, x.size(), "cycle_consistency");
  return mean_abs(x_rec.v, x.v, g_rec, g_x);
}

double identity_loss(const Tensor& x, const Tensor& g_of_x, std::span<double> g_x, std::span<double> g_gx) {
  require_same(x, g_of_x, "identity_loss");
  check_grad_span(g_x, x.size(), "identity_loss");
  check_grad_span(g_gx, x.size(), "identity_loss");
  return mean_abs(g_of_x.v, x.v, g_gx, g_x);
}

double tv_loss(const Tensor& img, std::span<double> g) {
  check_grad_span(g, img.size(), "tv_loss");
  if (!g.empty()) std::fill(g.begin(), g.end(), 0.0);
  return tv_value(img, g.empty() ? nullptr : g.data());
}

double content_loss(const Tensor& pred, const Tensor& ref, const FeatureMap& phi, Tensor* g_pred, Tensor* g_ref) {
  require_same(pred, ref, "content_loss");
  const Tensor fp = phi.forward(pred);
  const Tensor fr = phi.forward(ref);
  require_same(fp, fr, "content_loss features");
  const double n = static_cast<double>(fp.size());
  double ss = 0.0;
  for (std::size_t i = 0; i < fp.size(); ++i) ss += (fp.v[i] - fr.v[i]) * (fp.v[i] - fr.v[i]);
  const double norm = std::sqrt(ss);
  if (g_pred || g_ref) {
    Tensor gf(fp.c, fp.h, fp.w);
    if (norm > 0.0)
      for (std::size_t i = 0; i < fp.size(); ++i) gf.v[i] = (fp.v[i] - fr.v[i]) / (norm * n);
    if (g_pred) *g_pred = phi.vjp(pred, gf);
    if (g_ref) {
      for (double& v : gf.v) v = -v;
      *g_ref = phi.vjp(ref, gf);
    }
  }
  return norm / n;
}

double diffusion_loss(const Tensor& eps_true, const Tensor& eps_pred, std::span<double> g_true,
                      std::span<double> g_pred) {
  require_same(eps_true, eps_pred, "diffusion_loss");
  check_grad_span(g_true, eps_true.size(), "diffusion_loss");
  check_grad_span(g_pred, eps_true.size(), "diffusion_loss");
  const double n = static_cast<double>(eps_true.size());
  double s = 0.0;
  for (std::size_t i = 0; i < eps_true.size(); ++i) {
    const double d = eps_pred.v[i] - eps_true.v[i];
    s += d * d;
    if (!g_pred.empty()) g_pred[i] = 2.0 * d / n;
    if (!g_true.empty()) g_true[i] = -2.0 * d / n;
  }
  return s / n;
}

LossBreakdown total_loss(const LossBreakdown& parts, const LossWeights& w, Phase phase) {
  const LossWeights a = w.active(phase);
  LossBreakdown out = parts;
  out.total = a.w_adv * (parts.adv_g + parts.adv_d) + a.w_diff * parts.diff + a.w_tv * parts.tv +
              a.w_cyc * parts.cyc + a.w_content * parts.content + a.w_id * parts.id;
  return out;
}

namespace {

nlohmann::json override_json(const WeightOverride& o) {
  nlohmann::json j = nlohmann::json::object();
  if (o.w_adv) j["w_adv"] = *o.w_adv;
  if (o.w_cyc) j["w_cyc"] = *o.w_cyc;
  if (o.w_id) j["w_id"] = *o.w_id;
  if (o.w_tv) j["w_tv"] = *o.w_tv;
  if (o.w_content) j["w_content"] = *o.w_content;
  if (o.w_diff) j["w_diff"] = *o.w_diff;
  return j;
}

}  // namespace

nlohmann::json to_json(const LossWeights& w) {
  nlohmann::json sched = nlohmann::json::object();
  for (const auto& [p, o] : w.phase_schedule) sched[std::string(to_string(p))] = override_json(o);
  return {{"w_adv", w.w_adv},   {"w_cyc", w.w_cyc},         {"w_id", w.w_id},
          {"w_tv", w.w_tv},     {"w_content", w.w_content}, {"w_diff", w.w_diff},
          {"phase_schedule", sched}};
}

LossWeights loss_weights_from_json(const nlohmann::json& j) {
  static const char* kKeys[] = {"w_adv", "w_cyc", "w_id", "w_tv", "w_content", "w_diff", "phase_schedule"};
  for (const auto& [k, v] : j.items()) {
    bool known = false;
    for (const char* key : kKeys) known = known || k == key;
    if (!known) throw ConfigError("unknown loss_weights key '" + k + "'");
  }
  LossWeights w;
  w.w_adv = j.value("w_adv", w.w_adv);
  w.w_cyc = j.value("w_cyc", w.w_cyc);
  w.w_id = j.value("w_id", w.w_id);
  w.w_tv = j.value("w_tv", w.w_tv);
  w.w_content = j.value("w_content", w.w_content);
  w.w_diff = j.value("w_diff", w.w_diff);
  if (j.contains("phase_schedule")) {
    for (const auto& [name, o] : j.at("phase_schedule").items()) {
      WeightOverride wo;
      auto get = [&](const char* key, std::optional<double>& dst) {
        if (o.contains(key)) dst = o.at(key).get<double>();
      };
      get("w_adv", wo.w_adv);
      get("w_cyc", wo.w_cyc);
      get("w_id", wo.w_id);
      get("w_tv", wo.w_tv);
      get("w_content", wo.w_content);
      get("w_diff", wo.w_diff);
      w.phase_schedule[parse_phase(name)] = wo;
    }
  }
  w.validate();
  return w;
}

nlohmann::json to_json(const LossBreakdown& b) {
  return {{"adv_g", b.adv_g}, {"adv_d", b.adv_d},     {"cyc", b.cyc},   {"id", b.id},
          {"tv", b.tv},       {"content", b.content}, {"diff", b.diff}, {"total", b.total}};
}

namespace loss_ops {

Graph::Id adversarial_d(Graph& g, Graph::Id d_real, Graph::Id d_fake) {
  const Tensor& R = g.value(d_real);
  const Tensor& F = g.value(d_fake);
  auto gr = std::make_shared<Tensor>(R.c, R.h, R.w);
  auto gf = std::make_shared<Tensor>(F.c, F.h, F.w);
  const double v = vtcd::adversarial_d(R.v, F.v, gr->v, gf->v);
  return g.push(Tensor(1, 1, 1, v), {d_real, d_fake}, [&g, d_real, d_fake, gr, gf](const Tensor& go) {
    for (auto [id, buf] : {std::pair{d_real, gr}, std::pair{d_fake, gf}})
      if (g.tracked(id)) {
        Tensor& t = g.acc(id);
        for (std::size_t i = 0; i < t.v.size(); ++i) t.v[i] += go.v[0] * buf->v[i];
      }
  });
}

Graph::Id adversarial_g(Graph& g, Graph::Id d_fake) {
  const Tensor& F = g.value(d_fake);
  auto gf = std::make_shared<Tensor>(F.c, F.h, F.w);
  const double v = vtcd::adversarial_g(F.v, gf->v);
  return g.push(Tensor(1, 1, 1, v), {d_fake}, [&g, d_fake, gf](const Tensor& go) {
    Tensor& t = g.acc(d_fake);
    for (std::size_t i = 0; i < t.v.size(); ++i) t.v[i] += go.v[0] * gf->v[i];
  });
}

namespace {

Graph::Id pairwise(Graph& g, Graph::Id a, Graph::Id b, double v, std::shared_ptr<Tensor> ga,
                   std::shared_ptr<Tensor> gb) {
  return g.push(Tensor(1, 1, 1, v), {a, b}, [&g, a, b, ga, gb](const Tensor& go) {
    for (auto [id, buf] : {std::pair{a, ga}, std::pair{b, gb}})
      if (g.tracked(id)) {
        Tensor& t = g.acc(id);
        for (std::size_t i = 0; i < t.v.size(); ++i) t.v[i] += go.v[0] * buf->v[i];
      }
  });
}

}  // namespace

Graph::Id mae(Graph& g, Graph::Id a, Graph::Id b) {
  const Tensor& A = g.value(a);
  const Tensor& B = g.value(b);
  require_same(A, B, "mae");
  auto ga = std::make_shared<Tensor>(A.c, A.h, A.w);
  auto gb = std::make_shared<Tensor>(A.c, A.h, A.w);
  const double v = cycle_consistency(B, A, gb->v, ga->v);
  return pairwise(g, a, b, v, ga, gb);
}

Graph::Id mse(Graph& g, Graph::Id a, Graph::Id b) {
  const Tensor& A = g.value(a);
  const Tensor& B = g.value(b);
  require_same(A, B, "mse");
  auto ga = std::make_shared<Tensor>(A.c, A.h, A.w);
  auto gb = std::make_shared<Tensor>(A.c, A.h, A.w);
  const double v = diffusion_loss(B, A, gb->v, ga->v);
  return pairwise(g, a, b, v, ga, gb);
}

Graph::Id tv(Graph& g, Graph::Id img) {
  const Tensor& I = g.value(img);
  auto gi = std::make_shared<Tensor>(I.c, I.h, I.w);
  const double v = tv_loss(I, gi->v);
  return g.push(Tensor(1, 1, 1, v), {img}, [&g, img, gi](const Tensor& go) {
    Tensor& t = g.acc(img);
    for (std::size_t i = 0; i < t.v.size(); ++i) t.v[i] += go.v[0] * gi->v[i];
  });
}

Graph::Id feature_distance(Graph& g, Graph::Id fa, Graph::Id fb) {
  const IdentityFeatureMap id;
  const Tensor& A = g.value(fa);
  const Tensor& B = g.value(fb);
  require_same(A, B, "feature_distance");
  auto ga = std::make_shared<Tensor>();
  auto gb = std::make_shared<Tensor>();
  const double v = content_loss(A, B, id, ga.get(), gb.get());
  return pairwise(g, fa, fb, v, ga, gb);
}

}  // namespace loss_ops

}  // namespace vtcd
