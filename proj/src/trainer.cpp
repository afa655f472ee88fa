#include "vtcd/trainer.hpp"

#include <algorithm>
#include <bit>
#include <cmath>
#include <cstring>
#include <fstream>
#include <set>

#include "vtcd/error.hpp"

namespace vtcd {

namespace {

using nn::Graph;
using Id = Graph::Id;
using json = nlohmann::json;

constexpr char kMagic[8] = {'V', 'T', 'C', 'D', 'C', 'K', 'P', 'T'};

// ---------------------------------------------------------------- config JSON

const char* encoder_name(EncoderKind k) { return k == EncoderKind::PassThrough ? "passthrough" : "conv"; }

EncoderKind parse_encoder(const std::string& s) {
  if (s == "conv") return EncoderKind::Conv;
  if (s == "passthrough") return EncoderKind::PassThrough;
  throw ConfigError("unknown encoder kind '" + s + "'");
}

void reject_unknown(const json& j, std::initializer_list<const char*> keys, const std::string& where) {
  if (!j.is_object()) throw ConfigError(where + " must be a JSON object");
  const std::set<std::string> allowed(keys.begin(), keys.end());
  for (const auto& [k, v] : j.items())
    if (!allowed.count(k)) throw ConfigError("unknown key '" + k + "' in " + where);
}

template <class T>
void read_opt(const json& j, const char* key, T& dst) {
  if (j.contains(key)) dst = j.at(key).get<T>();
}

// ---------------------------------------------------------------- tensors

Tensor plane_of(const Tensor& vol, int z) {
  Tensor t(1, vol.h, vol.w);
  const auto src = vol.channel(z);
  std::copy(src.begin(), src.end(), t.v.begin());
  return t;
}

// Dihedral transform r in [0, 8); the transpose bit is skipped for non-square slices.
Tensor dihedral(const Tensor& x, int r) {
  Tensor out = x;
  if (r & 1)
    for (int i = 0; i < x.h; ++i)
      for (int j = 0; j < x.w; ++j) out.at(0, i, j) = x.at(0, x.h - 1 - i, j);
  if (r & 2) {
    const Tensor a = out;
    for (int i = 0; i < x.h; ++i)
      for (int j = 0; j < x.w; ++j) out.at(0, i, j) = a.at(0, i, x.w - 1 - j);
  }
  if ((r & 4) && x.h == x.w) {
    const Tensor a = out;
    for (int i = 0; i < x.h; ++i)
      for (int j = 0; j < x.w; ++j) out.at(0, i, j) = a.at(0, j, i);
  }
  return out;
}

Tensor crop_xy(const Tensor& vol, int x0, int y0, int size_h, int size_w) {
  Tensor out(vol.c, size_h, size_w);
  for (int c = 0; c < vol.c; ++c)
    for (int i = 0; i < size_h; ++i)
      for (int j = 0; j < size_w; ++j) out.at(c, i, j) = vol.at(c, x0 + i, y0 + j);
  return out;
}

// ---------------------------------------------------------------- training context

struct Context {
  const TrainConfig& cfg;
  Models& m;
  NoiseSchedule sched;
  NoiseSchedule sampler;
  std::vector<Tensor> train;   // degraded training volumes (C, H, W)
  std::vector<Tensor> cache;   // denoised training volumes for SR
  std::vector<double> taps;    // analytic axial kernel
  double lo = 0.0, hi = 1.0;
  std::optional<Hyperplane> hyperplane;
  Rng rng;
  int s = 4;
};

int shallow_limit(int C) { return std::max(1, C / 4); }

struct ShallowPair {
  Tensor x0, prev;
};

ShallowPair draw_shallow(Context& c, const Tensor& vol, bool augment) {
  const int C = vol.c;
  const int k = C > 1 ? c.rng.integer(1, std::min(shallow_limit(C), C - 1)) : 0;
  ShallowPair p{plane_of(vol, k), plane_of(vol, std::max(0, k - 1))};
  if (augment) {
    const int r = c.rng.integer(0, 7);
    p.x0 = dihedral(p.x0, r);
    p.prev = dihedral(p.prev, r);
  }
  return p;
}

// Mean noise-prediction error over bridge samples drawn from shallow slices.
Id diffusion_term(Graph& g, Context& c, bool track) {
  const int B = c.cfg.batch_size;
  std::vector<std::pair<double, Id>> terms;
  for (int b = 0; b < B; ++b) {
    const Tensor& vol = c.train[c.rng.integer(0, static_cast<int>(c.train.size()) - 1)];
    ShallowPair sp = draw_shallow(c, vol, true);
    const int ts = c.rng.integer(1, c.sched.T);
    const double s_ts = c.sched.noise_to_signal(ts);
    Tensor y = sp.x0;
    for (double& v : y.v) v = std::clamp(v + s_ts * c.rng.normal(), c.lo, c.hi);
    const int t = c.rng.integer(1, ts);
    Tensor x_ts = y;
    const double a_ts = std::sqrt(c.sched.alphas_bar[ts]);
    for (double& v : x_ts.v) v *= a_ts;
    auto [x_t, var] = forward_bridge(sp.x0, x_ts, t, ts, c.sched);
    const double sd = std::sqrt(std::max(var, 0.0));
    for (double& v : x_t.v) v += sd * c.rng.normal();
    const double a_t = std::sqrt(c.sched.alphas_bar[t]);
    const double inv_sig = 1.0 / std::sqrt(1.0 - c.sched.alphas_bar[t]);
    Tensor eps(1, y.h, y.w), xs(1, y.h, y.w);
    for (std::size_t i = 0; i < eps.v.size(); ++i) {
      eps.v[i] = (x_t.v[i] - a_t * sp.x0.v[i]) * inv_sig;
      xs.v[i] = x_t.v[i] / a_t;
    }
    const auto nodes = c.m.denoiser.forward(g, g.constant(std::move(xs)), g.constant(std::move(y)),
                                            g.constant(sp.prev), t, track);
    const Id eps_hat = g.scale(nodes.noise, 1.0 / c.sched.noise_to_signal(t));
    terms.emplace_back(1.0 / B, loss_ops::mse(g, eps_hat, g.constant(std::move(eps))));
  }
  return g.weighted_sum(terms);
}

// A shallow slice treated as already clean must come back unchanged at t = 1.
Id identity_term(Graph& g, Context& c, bool track) {
  const Tensor& vol = c.train[c.rng.integer(0, static_cast<int>(c.train.size()) - 1)];
  ShallowPair sp = draw_shallow(c, vol, true);
  const Id x0 = g.constant(sp.x0);
  const auto nodes = c.m.denoiser.forward(g, x0, x0, g.constant(sp.prev), 1, track);
  return loss_ops::mae(g, g.sub(x0, nodes.noise), x0);
}

const Hyperplane* active_plane(const Context& c) { return c.hyperplane ? &*c.hyperplane : nullptr; }

// One-step clean estimate x0_hat = y - N(y, t) of a slice observed at step t.
Id one_step(Graph& g, Context& c, Id y, Id prev, int t, bool track, bool edit) {
  const auto nodes = c.m.denoiser.forward(g, y, y, prev, t, track, edit ? active_plane(c) : nullptr,
                                          edit ? &c.cfg.edit : nullptr);
  return g.sub(y, nodes.noise);
}

struct AdvTerms {
  Id g = -1, d = -1;
};

// LSGAN pair: the generator side sees a frozen critic, the critic sees a detached fake.
AdvTerms adversarial(Graph& g, PatchDiscriminator& D, Id real, Id fake) {
  AdvTerms a;
  a.g = loss_ops::adversarial_g(g, D.forward(g, fake, false));
  a.d = loss_ops::adversarial_d(g, D.forward(g, real, true), D.forward(g, g.detach(fake), true));
  return a;
}

struct DenoiseExtras {
  AdvTerms adv;
  Id tv = -1;
};

// Deep slice of the full volume: one-step estimate judged against shallow slices, plus TV.
DenoiseExtras denoise_extras(Graph& g, Context& c, bool track) {
  const Tensor& vol = c.train[c.rng.integer(0, static_cast<int>(c.train.size()) - 1)];
  const int C = vol.c;
  const int zlo = std::min(C - 1, shallow_limit(C) + 1);
  const int z = C > 1 ? c.rng.integer(std::max(1, zlo), C - 1) : 0;
  const int t = std::max(1, step_for_index(z, C, c.sched.T));
  Tensor prev = plane_of(vol, std::max(0, z - 1));
  const int tp = z > 0 ? step_for_index(z - 1, C, c.sched.T) : 0;
  if (tp > 0) {
    const Tensor pp = plane_of(vol, std::max(0, z - 2));
    Graph h;
    const Id yp = h.constant(prev);
    prev = h.value(one_step(h, c, yp, h.constant(pp), tp, false, false));
  }
  const Id prev_id = g.constant(std::move(prev));
  const Id xhat = one_step(g, c, g.constant(plane_of(vol, z)), prev_id, t, track, false);
  ShallowPair sp = draw_shallow(c, vol, false);
  DenoiseExtras e;
  e.tv = loss_ops::tv(g, xhat);
  e.adv = adversarial(g, c.m.d_dn, g.concat({g.constant(sp.x0), g.constant(sp.prev)}), g.concat({xhat, prev_id}));
  return e;
}

struct SrTerms {
  Id cyc = -1, content = -1;
  AdvTerms adv;
};

// SR of a denoised crop, re-degraded along Z and compared with the crop.
SrTerms sr_terms(Graph& g, Context& c, Id xhat, bool track, bool learned_taps) {
  SrTerms r;
  const Id sr = c.m.srm.super_resolve(g, xhat, c.s, track);
  const Id lr = learned_taps ? srm_ops::axial_degrade(g, sr, g.param(c.m.gf_taps), c.s)
                             : srm_ops::axial_degrade(g, sr, c.taps, c.s);
  r.cyc = loss_ops::mae(g, lr, xhat);
  const int C = g.value(xhat).c;
  std::vector<Id> fa, fb;
  for (int z = 0; z < C; ++z) {
    fa.push_back(c.m.srm.encode(g, g.channel(lr, z)));
    fb.push_back(c.m.srm.encode(g, g.channel(xhat, z)));
  }
  r.content = loss_ops::feature_distance(g, g.concat(fa), g.concat(fb));
  const Tensor& S = g.value(sr);
  const bool yz = c.rng.integer(0, 1) == 1;
  const Id fake = yz ? srm_ops::yz_slice(g, sr, c.rng.integer(0, S.h - 1))
                     : srm_ops::xz_slice(g, sr, c.rng.integer(0, S.w - 1));
  const Id real = g.channel(xhat, c.rng.integer(0, C - 1));
  r.adv = adversarial(g, c.m.d_sr, real, fake);
  return r;
}

struct Crop {
  int x0, y0, h, w;
};

Crop draw_crop(Context& c, const Tensor& vol) {
  const int h = std::min(c.cfg.crop, vol.h), w = std::min(c.cfg.crop, vol.w);
  return {c.rng.integer(0, vol.h - h), c.rng.integer(0, vol.w - w), h, w};
}

struct StepNodes {
  Id adv_g = -1, adv_d = -1, cyc = -1, id = -1, tv = -1, content = -1, diff = -1;
};

StepNodes build_step(Graph& g, Context& c, Phase phase) {
  StepNodes n;
  std::vector<std::pair<double, Id>> ag, ad;
  if (phase == Phase::Denoise) {
    n.diff = diffusion_term(g, c, true);
    n.id = identity_term(g, c, true);
    const auto e = denoise_extras(g, c, true);
    n.tv = e.tv;
    n.adv_g = e.adv.g;
    n.adv_d = e.adv.d;
    return n;
  }
  if (phase == Phase::Sr) {
    const int i = c.rng.integer(0, static_cast<int>(c.cache.size()) - 1);
    const Crop cr = draw_crop(c, c.cache[i]);
    const Id x = g.constant(crop_xy(c.cache[i], cr.x0, cr.y0, cr.h, cr.w));
    const auto r = sr_terms(g, c, x, true, false);
    n.cyc = r.cyc;
    n.content = r.content;
    n.adv_g = r.adv.g;
    n.adv_d = r.adv.d;
    return n;
  }
  // JOINT: degraded crop -> one-step denoise per slice -> SR -> re-degrade.
  n.diff = diffusion_term(g, c, true);
  n.id = identity_term(g, c, true);
  const int i = c.rng.integer(0, static_cast<int>(c.train.size()) - 1);
  const Tensor& full = c.train[i];
  const Crop cr = draw_crop(c, full);
  const Tensor vol = crop_xy(full, cr.x0, cr.y0, cr.h, cr.w);
  const int C = vol.c;
  std::vector<Id> slices;
  Id prev = -1;
  for (int z = 0; z < C; ++z) {
    const Id y = g.constant(plane_of(vol, z));
    const int t = step_for_index(z, C, c.sched.T);
    Id pr = y;
    if (z > 0) {
      Tensor pv = g.value(prev);
      for (double& v : pv.v) v = std::clamp(v, c.lo, c.hi);
      pr = g.constant(std::move(pv));
    }
    const Id xh = t > 0 ? one_step(g, c, y, pr, t, true, true) : y;
    slices.push_back(xh);
    prev = xh;
  }
  const Id xhat = g.concat(slices);
  n.tv = loss_ops::tv(g, xhat);
  // The SR cycle sees the denoised crop as data; its terms do not reach the denoiser.
  const auto r = sr_terms(g, c, g.detach(xhat), true, c.cfg.learned_reverse);
  ShallowPair sp = draw_shallow(c, vol, false);
  const int zd = C - 1;
  const auto adn = adversarial(g, c.m.d_dn, g.concat({g.constant(sp.x0), g.constant(sp.prev)}),
                               g.concat({slices[zd], g.detach(slices[std::max(0, zd - 1)])}));
  n.cyc = r.cyc;
  n.content = r.content;
  n.adv_g = g.weighted_sum({{1.0, r.adv.g}, {1.0, adn.g}});
  n.adv_d = g.weighted_sum({{1.0, r.adv.d}, {1.0, adn.d}});
  return n;
}

std::vector<nn::Param*> trainable(std::vector<nn::Param*> ps) {
  std::erase_if(ps, [](const nn::Param* p) { return !p->trainable; });
  return ps;
}

std::vector<nn::Param*> generator_params(Models& m, Phase p, bool learned_reverse) {
  std::vector<nn::Param*> out;
  if (p != Phase::Sr)
    for (auto* q : m.denoiser.params()) out.push_back(q);
  if (p != Phase::Denoise)
    for (auto* q : m.srm.params()) out.push_back(q);
  if (p == Phase::Joint && learned_reverse) out.push_back(&m.gf_taps);
  return trainable(out);
}

std::vector<nn::Param*> critic_params(Models& m, Phase p) {
  std::vector<nn::Param*> out;
  if (p != Phase::Sr)
    for (auto* q : m.d_dn.params()) out.push_back(q);
  if (p != Phase::Denoise)
    for (auto* q : m.d_sr.params()) out.push_back(q);
  return out;
}

LossBreakdown run_step(Context& c, Phase phase, nn::Adam& opt) {
  const LossWeights w = c.cfg.loss_weights.active(phase);
  auto gen = generator_params(c.m, phase, c.cfg.learned_reverse);
  auto crit = critic_params(c.m, phase);
  for (auto* p : c.m.all_params()) p->zero_grad();

  Graph g;
  const StepNodes n = build_step(g, c, phase);
  std::vector<std::pair<double, Id>> terms;
  LossBreakdown b;
  auto take = [&](Id id, double weight, double& slot) {
    if (id < 0) return;
    slot = g.scalar(id);
    terms.emplace_back(weight, id);
  };
  take(n.adv_g, w.w_adv, b.adv_g);
  take(n.adv_d, w.w_adv, b.adv_d);
  take(n.cyc, w.w_cyc, b.cyc);
  take(n.id, w.w_id, b.id);
  take(n.tv, w.w_tv, b.tv);
  take(n.content, w.w_content, b.content);
  take(n.diff, w.w_diff, b.diff);
  const Id total = g.weighted_sum(terms);
  b.total = g.scalar(total);
  if (!std::isfinite(b.total)) throw TrainingError("non-finite loss in phase " + std::string(to_string(phase)));
  g.backward(total);
  nn::clip_grad_norm(gen, c.cfg.grad_clip);
  nn::clip_grad_norm(crit, c.cfg.grad_clip);
  auto all = gen;
  all.insert(all.end(), crit.begin(), crit.end());
  opt.step(all);
  return b;
}

void refit_hyperplane(Context& c) {
  std::vector<Volume3D> vols;
  for (const auto& t : c.train) vols.push_back(from_tensor(t, {1.0, 1.0, 1.0}, {c.lo, c.hi}));
  try {
    auto [low, high] = collect_latents(c.m.denoiser, vols, c.sched);
    c.hyperplane = fit_hyperplane(low, high);
  } catch (const DegeneracyError&) {
    c.hyperplane.reset();
  } catch (const ValidationError&) {
    c.hyperplane.reset();
  }
}

std::uint64_t cache_seed(const TrainConfig& cfg, std::size_t i) { return cfg.seed * 1000003ULL + 17 + i; }

void build_cache(Context& c) {
  c.cache.clear();
  const EditConfig none{};
  const EditConfig& edit = c.hyperplane ? c.cfg.edit : none;
  for (std::size_t i = 0; i < c.train.size(); ++i) {
    const Volume3D v = from_tensor(c.train[i], {1.0, 1.0, 1.0}, {c.lo, c.hi});
    const Volume3D d = denoise_volume(v, c.m.denoiser, active_plane(c), edit, c.sampler, cache_seed(c.cfg, i));
    c.cache.push_back(to_tensor(d));
  }
}

json breakdown_mean(const std::vector<LossBreakdown>& v) {
  LossBreakdown m;
  for (const auto& b : v) {
    m.adv_g += b.adv_g;
    m.adv_d += b.adv_d;
    m.cyc += b.cyc;
    m.id += b.id;
    m.tv += b.tv;
    m.content += b.content;
    m.diff += b.diff;
    m.total += b.total;
  }
  const double n = v.empty() ? 1.0 : static_cast<double>(v.size());
  for (double* p : {&m.adv_g, &m.adv_d, &m.cyc, &m.id, &m.tv, &m.content, &m.diff, &m.total}) *p /= n;
  return to_json(m);
}

void snapshot(Checkpoint& ck, Models& m, const nn::Adam& opt, const Context& c) {
  ck.params.clear();
  for (auto* p : m.all_params()) ck.params[p->name] = p->value;
  ck.optimizer = opt.states();
  ck.rng_state = c.rng.state();
  ck.hyperplane = c.hyperplane;
}

json config_without_epochs(const TrainConfig& cfg) {
  json j = to_json(cfg);
  j.erase("epochs_per_phase");
  return j;
}

// ---------------------------------------------------------------- checkpoint I/O

void put_u32(std::string& out, std::uint32_t v) {
  for (int i = 0; i < 4; ++i) out.push_back(static_cast<char>((v >> (8 * i)) & 0xFF));
}

void put_f64(std::string& out, double d) {
  const auto u = std::bit_cast<std::uint64_t>(d);
  for (int i = 0; i < 8; ++i) out.push_back(static_cast<char>((u >> (8 * i)) & 0xFF));
}

double get_f64(const unsigned char* p) {
  std::uint64_t u = 0;
  for (int i = 0; i < 8; ++i) u |= static_cast<std::uint64_t>(p[i]) << (8 * i);
  return std::bit_cast<double>(u);
}

json shape_of(const Tensor& t) { return json::array({t.c, t.h, t.w}); }

}  // namespace

// ---------------------------------------------------------------- TrainConfig

void TrainConfig::validate() const {
  for (int e : epochs_per_phase)
    if (e < 0) throw ConfigError("epochs_per_phase entries must be >= 0");
  if (steps_per_epoch < 1) throw ConfigError("steps_per_epoch must be >= 1");
  if (!(learning_rate > 0.0) || !std::isfinite(learning_rate)) throw ConfigError("learning_rate must be > 0");
  if (weight_decay < 0.0) throw ConfigError("weight_decay must be >= 0");
  if (batch_size < 1) throw ConfigError("batch_size must be >= 1");
  if (T < 1) throw ConfigError("T must be >= 1");
  if (sr_scale < 1) throw ConfigError("sr_scale must be >= 1");
  if (sampler_eta < 0.0) throw ConfigError("sampler_eta must be >= 0");
  if (crop < 4) throw ConfigError("crop must be >= 4");
  if (disc_width < 1) throw ConfigError("disc_width must be >= 1");
  loss_weights.validate();
  try {
    edit.validate();
    (void)make_linear_schedule(T, beta_start, beta_end);
  } catch (const ValidationError& e) {
    throw ConfigError(e.what());
  }
}

NoiseSchedule TrainConfig::schedule() const { return make_linear_schedule(T, beta_start, beta_end); }

json to_json(const TrainConfig& c) {
  return {{"epochs_per_phase", c.epochs_per_phase},
          {"steps_per_epoch", c.steps_per_epoch},
          {"learning_rate", c.learning_rate},
          {"weight_decay", c.weight_decay},
          {"amsgrad", c.amsgrad},
          {"batch_size", c.batch_size},
          {"T", c.T},
          {"beta_start", c.beta_start},
          {"beta_end", c.beta_end},
          {"seed", c.seed},
          {"loss_weights", to_json(c.loss_weights)},
          {"sr_scale", c.sr_scale},
          {"sampler_eta", c.sampler_eta},
          {"grad_clip", c.grad_clip},
          {"edit", {{"lambda", c.edit.lambda}, {"t_lo", c.edit.t_lo}, {"t_hi", c.edit.t_hi}}},
          {"learned_reverse", c.learned_reverse},
          {"overlay_yz", c.overlay_yz},
          {"crop", c.crop},
          {"denoiser", {{"c1", c.denoiser.c1}, {"c2", c.denoiser.c2}, {"temb", c.denoiser.temb}}},
          {"srm",
           {{"d", c.srm.d},
            {"enc_hidden", c.srm.enc_hidden},
            {"acc_hidden", c.srm.acc_hidden},
            {"head_hidden", c.srm.head_hidden},
            {"encoder", encoder_name(c.srm.encoder)}}},
          {"disc_width", c.disc_width}};
}

TrainConfig train_config_from_json(const json& j) {
  TrainConfig c;
  try {
    reject_unknown(j,
                   {"epochs_per_phase", "steps_per_epoch", "learning_rate", "weight_decay", "amsgrad", "batch_size",
                    "T", "beta_start", "beta_end", "seed", "loss_weights", "sr_scale", "sampler_eta", "grad_clip",
                    "edit", "learned_reverse", "overlay_yz", "crop", "denoiser", "srm", "disc_width"},
                   "train config");
    if (j.contains("epochs_per_phase")) {
      const auto e = j.at("epochs_per_phase").get<std::vector<int>>();
      if (e.size() != 3) throw ConfigError("epochs_per_phase needs exactly 3 entries");
      c.epochs_per_phase = {e[0], e[1], e[2]};
    }
    read_opt(j, "steps_per_epoch", c.steps_per_epoch);
    read_opt(j, "learning_rate", c.learning_rate);
    read_opt(j, "weight_decay", c.weight_decay);
    read_opt(j, "amsgrad", c.amsgrad);
    read_opt(j, "batch_size", c.batch_size);
    read_opt(j, "T", c.T);
    read_opt(j, "beta_start", c.beta_start);
    read_opt(j, "beta_end", c.beta_end);
    read_opt(j, "seed", c.seed);
    if (j.contains("loss_weights")) c.loss_weights = loss_weights_from_json(j.at("loss_weights"));
    read_opt(j, "sr_scale", c.sr_scale);
    read_opt(j, "sampler_eta", c.sampler_eta);
    read_opt(j, "grad_clip", c.grad_clip);
    if (j.contains("edit")) {
      const auto& e = j.at("edit");
      reject_unknown(e, {"lambda", "t_lo", "t_hi"}, "edit");
      read_opt(e, "lambda", c.edit.lambda);
      read_opt(e, "t_lo", c.edit.t_lo);
      read_opt(e, "t_hi", c.edit.t_hi);
    }
    read_opt(j, "learned_reverse", c.learned_reverse);
    read_opt(j, "overlay_yz", c.overlay_yz);
    read_opt(j, "crop", c.crop);
    if (j.contains("denoiser")) {
      const auto& d = j.at("denoiser");
      reject_unknown(d, {"c1", "c2", "temb"}, "denoiser");
      read_opt(d, "c1", c.denoiser.c1);
      read_opt(d, "c2", c.denoiser.c2);
      read_opt(d, "temb", c.denoiser.temb);
    }
    if (j.contains("srm")) {
      const auto& s = j.at("srm");
      reject_unknown(s, {"d", "enc_hidden", "acc_hidden", "head_hidden", "encoder"}, "srm");
      read_opt(s, "d", c.srm.d);
      read_opt(s, "enc_hidden", c.srm.enc_hidden);
      read_opt(s, "acc_hidden", c.srm.acc_hidden);
      read_opt(s, "head_hidden", c.srm.head_hidden);
      if (s.contains("encoder")) c.srm.encoder = parse_encoder(s.at("encoder").get<std::string>());
    }
    read_opt(j, "disc_width", c.disc_width);
  } catch (const json::exception& e) {
    throw ConfigError(std::string("train config: ") + e.what());
  }
  c.validate();
  return c;
}

TrainConfig load_train_config(const std::filesystem::path& path) {
  std::ifstream is(path);
  if (!is) throw IoError("cannot open config " + path.string());
  json j;
  try {
    is >> j;
  } catch (const json::exception& e) {
    throw ConfigError("config " + path.string() + " is not valid JSON: " + e.what());
  }
  return train_config_from_json(j);
}

// ---------------------------------------------------------------- networks

PatchDiscriminator::PatchDiscriminator(std::string prefix, int in_channels, int width, std::uint64_t seed) {
  Rng rng(seed);
  w1_ = nn::conv_weight(prefix + ".c1.w", width, in_channels, 3, rng);
  b1_ = nn::zeros(prefix + ".c1.b", width);
  w2_ = nn::conv_weight(prefix + ".c2.w", width, width, 3, rng);
  b2_ = nn::zeros(prefix + ".c2.b", width);
  w3_ = nn::zeros(prefix + ".c3.w", 1, width, 1);
  b3_ = nn::zeros(prefix + ".c3.b", 1);
}

Id PatchDiscriminator::forward(Graph& g, Id x, bool track) {
  auto p = [&](nn::Param& q) { return track ? g.param(q) : g.frozen(q); };
  auto h = g.lrelu(g.conv2d(x, p(w1_), p(b1_), 3));
  h = g.lrelu(g.conv2d(g.avgpool2(h), p(w2_), p(b2_), 3));
  return g.conv2d(h, p(w3_), p(b3_), 1);
}

std::vector<nn::Param*> PatchDiscriminator::params() { return {&w1_, &b1_, &w2_, &b2_, &w3_, &b3_}; }

Models::Models(const TrainConfig& cfg, double axial_blur_sigma)
    : denoiser(cfg.denoiser, cfg.seed * 4 + 1),
      srm(cfg.srm, cfg.seed * 4 + 2, cfg.overlay_yz),
      d_dn("disc_dn", 2, cfg.disc_width, cfg.seed * 4 + 3),
      d_sr("disc_sr", 1, cfg.disc_width, cfg.seed * 4 + 4) {
  const auto taps = gaussian_taps(axial_blur_sigma);
  Tensor t(1, 1, static_cast<int>(taps.size()));
  t.v = taps;
  gf_taps = nn::Param("gf.taps", std::move(t));
}

std::vector<nn::Param*> Models::all_params() {
  std::vector<nn::Param*> out = denoiser.params();
  for (auto* p : srm.params()) out.push_back(p);
  for (auto* p : d_dn.params()) out.push_back(p);
  for (auto* p : d_sr.params()) out.push_back(p);
  out.push_back(&gf_taps);
  return out;
}

void load_params(Models& m, const Checkpoint& ck) {
  for (auto* p : m.all_params()) {
    const auto it = ck.params.find(p->name);
    if (it == ck.params.end()) throw FormatError("checkpoint lacks parameter '" + p->name + "'");
    if (!it->second.same_shape(p->value)) throw FormatError("checkpoint parameter '" + p->name + "' has the wrong shape");
    p->value = it->second;
  }
}

// ---------------------------------------------------------------- checkpoint files

void save_checkpoint(const Checkpoint& ck, const std::filesystem::path& path) {
  std::string payload;
  json blobs = json::array();
  std::size_t offset = 0;
  auto add_blob = [&](const std::string& name, const Tensor& t) {
    blobs.push_back({{"name", name}, {"shape", shape_of(t)}, {"offset", offset}, {"count", t.v.size()}});
    for (double d : t.v) put_f64(payload, d);
    offset += t.v.size();
  };
  for (const auto& [name, t] : ck.params) add_blob("param/" + name, t);
  json opt = json::object();
  for (const auto& [name, st] : ck.optimizer) {
    opt[name] = {{"step", st.step}};
    add_blob("adam/" + name + "/m", st.m);
    add_blob("adam/" + name + "/v", st.v);
    add_blob("adam/" + name + "/vmax", st.vmax);
  }
  json head = {{"format_version", ck.format_version},
               {"phase", std::string(to_string(ck.phase))},
               {"epoch", ck.epoch},
               {"completed_epochs", ck.completed_epochs},
               {"global_step", ck.global_step},
               {"config", to_json(ck.config)},
               {"degradation", to_json(ck.degradation)},
               {"rng_state", ck.rng_state},
               {"hyperplane", ck.hyperplane ? to_json(*ck.hyperplane) : json(nullptr)},
               {"optimizer", opt},
               {"blobs", blobs}};
  const std::string hs = head.dump();
  std::string out(kMagic, sizeof kMagic);
  put_u32(out, static_cast<std::uint32_t>(hs.size()));
  out += hs;
  out += payload;
  const auto tmp = path.string() + ".tmp";
  {
    std::ofstream os(tmp, std::ios::binary | std::ios::trunc);
    if (!os) throw IoError("cannot open " + tmp + " for writing");
    os.write(out.data(), static_cast<std::streamsize>(out.size()));
    if (!os) throw IoError("failed writing " + tmp);
  }
  std::filesystem::rename(tmp, path);
}

Checkpoint load_checkpoint(const std::filesystem::path& path) {
  std::ifstream is(path, std::ios::binary);
  if (!is) throw IoError("cannot open checkpoint " + path.string());
  const std::string buf((std::istreambuf_iterator<char>(is)), std::istreambuf_iterator<char>());
  if (buf.size() < 12 || std::memcmp(buf.data(), kMagic, 8) != 0)
    throw FormatError(path.string() + " is not a checkpoint (bad magic)");
  std::uint32_t hl = 0;
  for (int i = 0; i < 4; ++i) hl |= static_cast<std::uint32_t>(static_cast<unsigned char>(buf[8 + i])) << (8 * i);
  if (buf.size() < 12 + static_cast<std::size_t>(hl)) throw FormatError("checkpoint header truncated");
  json head;
  try {
    head = json::parse(buf.substr(12, hl));
  } catch (const json::exception& e) {
    throw FormatError(std::string("checkpoint header unreadable: ") + e.what());
  }
  Checkpoint ck;
  try {
    ck.format_version = head.at("format_version").get<int>();
    if (ck.format_version != kCheckpointVersion)
      throw FormatError("checkpoint format version " + std::to_string(ck.format_version) + ", expected " +
                        std::to_string(kCheckpointVersion));
    ck.phase = parse_phase(head.at("phase").get<std::string>());
    ck.epoch = head.at("epoch").get<int>();
    ck.completed_epochs = head.at("completed_epochs").get<int>();
    ck.global_step = head.at("global_step").get<long>();
    ck.config = train_config_from_json(head.at("config"));
    ck.degradation = degradation_spec_from_json(head.at("degradation"));
    ck.rng_state = head.at("rng_state").get<std::string>();
    if (!head.at("hyperplane").is_null()) ck.hyperplane = hyperplane_from_json(head.at("hyperplane"));

    const std::size_t payload_at = 12 + hl;
    const std::size_t available = (buf.size() - payload_at) / 8;
    std::map<std::string, Tensor> blobs;
    std::size_t expected = 0;
    for (const auto& b : head.at("blobs")) {
      const auto shape = b.at("shape").get<std::vector<int>>();
      const std::size_t off = b.at("offset").get<std::size_t>(), count = b.at("count").get<std::size_t>();
      if (shape.size() != 3) throw FormatError("checkpoint blob shape must have 3 entries");
      Tensor t(shape[0], shape[1], shape[2]);
      if (t.v.size() != count) throw FormatError("checkpoint blob count disagrees with its shape");
      if (off + count > available) throw FormatError("checkpoint payload truncated");
      const auto* p = reinterpret_cast<const unsigned char*>(buf.data() + payload_at + off * 8);
      for (std::size_t i = 0; i < count; ++i) t.v[i] = get_f64(p + 8 * i);
      expected = std::max(expected, off + count);
      blobs[b.at("name").get<std::string>()] = std::move(t);
    }
    if (buf.size() - payload_at != expected * 8) throw FormatError("checkpoint payload has trailing or missing bytes");
    for (auto& [name, t] : blobs)
      if (name.rfind("param/", 0) == 0) ck.params[name.substr(6)] = t;
    for (const auto& [name, st] : head.at("optimizer").items()) {
      nn::Adam::State s;
      s.step = st.at("step").get<long>();
      for (auto [suffix, dst] : {std::pair{"/m", &s.m}, {"/v", &s.v}, {"/vmax", &s.vmax}}) {
        const auto it = blobs.find("adam/" + name + suffix);
        if (it == blobs.end()) throw FormatError("checkpoint lacks optimizer state for '" + name + "'");
        *dst = it->second;
      }
      ck.optimizer[name] = std::move(s);
    }
  } catch (const json::exception& e) {
    throw FormatError(std::string("checkpoint header malformed: ") + e.what());
  } catch (const ConfigError& e) {
    throw FormatError(std::string("checkpoint config invalid: ") + e.what());
  }
  return ck;
}

// ---------------------------------------------------------------- train

Checkpoint train(const TrainConfig& cfg, const DatasetManifest& manifest, const std::filesystem::path& out_dir,
                 const TrainOptions& opts) {
  cfg.validate();
  if (manifest.entries.empty()) throw ConfigError("manifest has no entries");
  if (manifest.train.empty()) throw ConfigError("manifest training split is empty");

  const DegradationSpec deg = manifest.entries.at(manifest.train.front()).degradation_spec;
  if (deg.axial_factor != cfg.sr_scale)
    throw ConfigError("sr_scale " + std::to_string(cfg.sr_scale) + " differs from the dataset's axial factor " +
                      std::to_string(deg.axial_factor));

  Models models(cfg, deg.axial_blur_sigma);
  nn::Adam opt({cfg.learning_rate, 0.9, 0.999, 1e-8, cfg.weight_decay, cfg.amsgrad});
  Context c{cfg, models, cfg.schedule(), cfg.schedule().with_noise_scale(cfg.sampler_eta), {}, {},
            gaussian_taps(deg.axial_blur_sigma), 0.0, 1.0, std::nullopt, Rng(cfg.seed), cfg.sr_scale};

  std::optional<Dims> dims;
  for (int i : manifest.train) {
    const Volume3D v = load_volume(manifest.degraded(i));
    if (dims && !(*dims == v.dims())) throw DimensionError("training volumes differ in dimensions");
    dims = v.dims();
    c.lo = v.range().lo;
    c.hi = v.range().hi;
    c.train.push_back(to_tensor(v));
  }

  Checkpoint ck;
  ck.config = cfg;
  ck.degradation = deg;
  bool resumed = false;
  if (opts.resume) {
    const Checkpoint prev = load_checkpoint(*opts.resume);
    if (config_without_epochs(prev.config) != config_without_epochs(cfg))
      throw ConfigError("resume checkpoint was trained with a different configuration");
    load_params(models, prev);
    opt.states() = prev.optimizer;
    if (!c.rng.set_state(prev.rng_state)) throw FormatError("checkpoint rng state unreadable");
    c.hyperplane = prev.hyperplane;
    ck.phase = prev.phase;
    ck.epoch = prev.epoch;
    ck.completed_epochs = prev.completed_epochs;
    ck.global_step = prev.global_step;
    resumed = prev.completed_epochs > 0;
  }

  std::ofstream log;
  if (opts.write_files) {
    std::filesystem::create_directories(out_dir);
    log.open(out_dir / "loss_log.jsonl", resumed ? std::ios::app : std::ios::trunc);
    if (!log) throw IoError("cannot write " + (out_dir / "loss_log.jsonl").string());
  }

  for (int pi = 0; pi < 3; ++pi) {
    const Phase phase = static_cast<Phase>(pi);
    const int E = cfg.epochs_per_phase[pi];
    bool entered = false;
    for (int e = 0; e < E; ++e) {
      if (resumed && (pi < static_cast<int>(ck.phase) || (pi == static_cast<int>(ck.phase) && e <= ck.epoch)))
        continue;
      if (!entered) {
        entered = true;
        if (phase == Phase::Sr) build_cache(c);
      }
      std::vector<LossBreakdown> epoch_losses;
      for (int s = 0; s < cfg.steps_per_epoch; ++s) {
        const LossBreakdown b = run_step(c, phase, opt);
        ++ck.global_step;
        epoch_losses.push_back(b);
        if (opts.on_step) opts.on_step({phase, e, ck.global_step, b});
      }
      if (e == E - 1 && phase != Phase::Sr) refit_hyperplane(c);
      ck.phase = phase;
      ck.epoch = e;
      ++ck.completed_epochs;
      snapshot(ck, models, opt, c);
      if (opts.write_files) {
        log << json{{"phase", std::string(to_string(phase))},
                    {"epoch", e},
                    {"step", ck.global_step},
                    {"loss", breakdown_mean(epoch_losses)},
                    {"weights", to_json(cfg.loss_weights.active(phase))}}
                   .dump()
            << '\n';
        log.flush();
        save_checkpoint(ck, out_dir / "last.vtck");
      }
    }
  }
  snapshot(ck, models, opt, c);
  if (opts.write_files) save_checkpoint(ck, out_dir / "final.vtck");
  return ck;
}

Volume3D restore_volume(const Checkpoint& ck, const Volume3D& vol, RestoreMode mode) {
  vol.validate();
  Models m(ck.config, ck.degradation.axial_blur_sigma);
  load_params(m, ck);
  const NoiseSchedule sampler = ck.config.schedule().with_noise_scale(ck.config.sampler_eta);
  const Hyperplane* h = ck.hyperplane ? &*ck.hyperplane : nullptr;
  Volume3D out = vol;
  if (mode != RestoreMode::SrOnly) out = denoise_volume(out, m.denoiser, h, ck.config.edit, sampler, ck.config.seed);
  if (mode != RestoreMode::DenoiseOnly) out = super_resolve_volume(out, m.srm, ck.config.sr_scale);
  out.clip_to_range();
  return out;
}

}  // namespace vtcd
