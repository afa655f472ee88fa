#include "vtcd/phantom.hpp"

#include <algorithm>
#include <cmath>
#include <cstdio>
#include <fstream>
#include <numbers>

#include "vtcd/error.hpp"
#include "vtcd/rng.hpp"

namespace vtcd {

namespace {

constexpr int kAttemptsPerCell = 1000;
constexpr int kRestarts = 20;

double cell_margin(const double axes[3], double thickness) {
  const double amax = std::max({axes[0], axes[1], axes[2]});
  const double amean = (axes[0] + axes[1] + axes[2]) / 3.0;
  return amax * (1.0 + thickness / amean);
}

}  // namespace

void PhantomSpec::validate() const {
  if (dims.h < 2 || dims.w < 2 || dims.c < 1) throw ValidationError("phantom dims " + to_string(dims) + " too small");
  if (num_cells < 0) throw ValidationError("num_cells must be >= 0");
  if (!(radius_min > 0.0) || radius_max < radius_min)
    throw ValidationError("radius_range must satisfy 0 < min <= max");
  const int min_dim = std::min({dims.h, dims.w, dims.c});
  if (radius_max > 0.5 * min_dim)
    throw ValidationError("radius_range exceeds half the smallest volume extent");
  if (!(membrane_thickness > 0.0)) throw ValidationError("membrane_thickness must be > 0");
  if (background_level < 0.0 || background_level > 1.0 || membrane_level < 0.0 || membrane_level > 1.0)
    throw ValidationError("intensity levels must lie in [0,1]");
  if (!(membrane_level > background_level))
    throw ValidationError("membrane_level must exceed background_level");
}

void DegradationSpec::validate() const {
  if (!(sigma0 >= 0.0) || !(sigma1 >= 0.0)) throw ValidationError("noise sigmas must be >= 0");
  if (axial_factor < 1) throw ValidationError("axial_factor must be >= 1");
  if (!(axial_blur_sigma >= 0.0)) throw ValidationError("axial_blur_sigma must be >= 0");
}

double shell_profile(double dist, double thickness) {
  const double a = std::abs(dist);
  if (a <= 0.5 * thickness) return 1.0;
  if (a >= 1.5 * thickness) return 0.0;
  return 0.5 * (1.0 + std::cos(std::numbers::pi * (a - 0.5 * thickness) / thickness));
}

std::vector<CellGeometry> place_cells(const PhantomSpec& spec) {
  spec.validate();
  Rng rng(spec.seed);
  const double ext[3] = {static_cast<double>(spec.dims.h), static_cast<double>(spec.dims.w),
                         static_cast<double>(spec.dims.c)};
  for (int restart = 0; restart < kRestarts; ++restart) {
    std::vector<CellGeometry> cells;
    std::vector<double> margins;
    bool ok = true;
    for (int i = 0; i < spec.num_cells && ok; ++i) {
      bool placed = false;
      for (int attempt = 0; attempt < kAttemptsPerCell && !placed; ++attempt) {
        CellGeometry g{};
        for (double& a : g.axes) a = rng.uniform(spec.radius_min, spec.radius_max);
        const double m = cell_margin(g.axes, spec.membrane_thickness);
        bool fits = true;
        for (int k = 0; k < 3; ++k) {
          const double lo = spec.allow_clipping ? 0.0 : m;
          const double hi = ext[k] - 1.0 - lo;
          if (hi < lo) {
            fits = false;
            g.center[k] = 0.0;
          } else {
            g.center[k] = rng.uniform(lo, hi);
          }
        }
        if (!fits) continue;
        for (std::size_t j = 0; j < cells.size() && fits; ++j) {
          double d2 = 0.0;
          for (int k = 0; k < 3; ++k) d2 += (g.center[k] - cells[j].center[k]) * (g.center[k] - cells[j].center[k]);
          fits = std::sqrt(d2) >= m + margins[j];
        }
        if (fits) {
          cells.push_back(g);
          margins.push_back(m);
          placed = true;
        }
      }
      ok = placed;
    }
    if (ok) return cells;
  }
  throw PlacementError("could not place " + std::to_string(spec.num_cells) + " cells in " + to_string(spec.dims) +
                       " after " + std::to_string(kRestarts) + " restarts");
}

Volume3D generate_phantom(const PhantomSpec& spec) {
  const auto cells = place_cells(spec);
  Volume3D vol(spec.dims, {1.0, 1.0, 1.0}, {0.0, 1.0}, static_cast<float>(spec.background_level));
  const int ext[3] = {spec.dims.h, spec.dims.w, spec.dims.c};
  std::vector<double> g(spec.dims.voxels(), 0.0);
  const double th = spec.membrane_thickness;
  for (const auto& cell : cells) {
    const double amax = std::max({cell.axes[0], cell.axes[1], cell.axes[2]});
    const double amean = (cell.axes[0] + cell.axes[1] + cell.axes[2]) / 3.0;
    const double reach = amax * (1.0 + 1.5 * th / amean) + 1.0;
    int lo[3], hi[3];
    for (int k = 0; k < 3; ++k) {
      lo[k] = std::max(0, static_cast<int>(std::floor(cell.center[k] - reach)));
      hi[k] = std::min(ext[k] - 1, static_cast<int>(std::ceil(cell.center[k] + reach)));
    }
    for (int z = lo[2]; z <= hi[2]; ++z)
      for (int x = lo[0]; x <= hi[0]; ++x)
        for (int y = lo[1]; y <= hi[1]; ++y) {
          const double px = (x - cell.center[0]) / cell.axes[0];
          const double py = (y - cell.center[1]) / cell.axes[1];
          const double pz = (z - cell.center[2]) / cell.axes[2];
          const double rho = std::sqrt(px * px + py * py + pz * pz);
          const double v = shell_profile((rho - 1.0) * amean, th);
          auto& slot = g[vol.index(x, y, z)];
          slot = std::max(slot, v);
        }
  }
  auto data = vol.data();
  const double bg = spec.background_level, span = spec.membrane_level - spec.background_level;
  for (std::size_t i = 0; i < data.size(); ++i)
    data[i] = static_cast<float>(std::clamp(bg + span * g[i], 0.0, 1.0));
  return vol;
}

std::vector<double> gaussian_taps(double sigma) {
  if (sigma <= 0.0) return {1.0};
  const int r = static_cast<int>(std::ceil(3.0 * sigma));
  std::vector<double> taps(2 * r + 1);
  double sum = 0.0;
  for (int i = -r; i <= r; ++i) {
    taps[i + r] = std::exp(-0.5 * i * i / (sigma * sigma));
    sum += taps[i + r];
  }
  for (double& t : taps) t /= sum;
  return taps;
}

Tensor axial_degrade(const Tensor& vol, const std::vector<double>& taps, int s) {
  if (s < 1 || vol.c % s != 0)
    throw DimensionError("axial factor " + std::to_string(s) + " does not divide depth " + std::to_string(vol.c));
  const int depth = vol.c, r = static_cast<int>(taps.size() / 2);
  const std::size_t plane = vol.plane();
  Tensor out(depth / s, vol.h, vol.w);
  const double inv = 1.0 / s;
  for (int z = 0; z < depth; ++z) {
    auto dst = out.channel(z / s);
    for (int k = -r; k <= r; ++k) {
      const int zz = std::clamp(z + k, 0, depth - 1);
      const double wgt = taps[k + r] * inv;
      auto src = vol.channel(zz);
      for (std::size_t i = 0; i < plane; ++i) dst[i] += wgt * src[i];
    }
  }
  return out;
}

Tensor axial_degrade_adjoint(const Tensor& grad_lr, const std::vector<double>& taps, int s, int full_depth) {
  const int r = static_cast<int>(taps.size() / 2);
  const std::size_t plane = grad_lr.plane();
  Tensor out(full_depth, grad_lr.h, grad_lr.w);
  const double inv = 1.0 / s;
  for (int z = 0; z < full_depth; ++z) {
    auto src = grad_lr.channel(z / s);
    for (int k = -r; k <= r; ++k) {
      const int zz = std::clamp(z + k, 0, full_depth - 1);
      const double wgt = taps[k + r] * inv;
      auto dst = out.channel(zz);
      for (std::size_t i = 0; i < plane; ++i) dst[i] += wgt * src[i];
    }
  }
  return out;
}

double noise_sigma_at(const DegradationSpec& deg, int z, int depth) {
  if (depth <= 1) return deg.sigma0;
  return deg.sigma0 + deg.sigma1 * static_cast<double>(z) / static_cast<double>(depth - 1);
}

Volume3D degrade_volume(const Volume3D& clean, const DegradationSpec& deg) {
  deg.validate();
  clean.validate();
  const auto& d = clean.dims();
  if (d.c % deg.axial_factor != 0)
    throw DimensionError("axial factor " + std::to_string(deg.axial_factor) + " does not divide C=" +
                         std::to_string(d.c));
  Tensor lr = axial_degrade(to_tensor(clean), gaussian_taps(deg.axial_blur_sigma), deg.axial_factor);
  Rng rng(deg.seed);
  for (int z = 0; z < lr.c; ++z) {
    const double sigma = noise_sigma_at(deg, z, lr.c);
    for (double& v : lr.channel(z)) {
      const double n = rng.normal();
      v = std::clamp(v + sigma * n, 0.0, 1.0);
    }
  }
  auto vs = clean.voxel_size();
  vs[2] *= deg.axial_factor;
  return from_tensor(lr, vs, clean.range());
}

nlohmann::json to_json(const PhantomSpec& s) {
  return {{"dims", {s.dims.h, s.dims.w, s.dims.c}},
          {"num_cells", s.num_cells},
          {"radius_range", {s.radius_min, s.radius_max}},
          {"membrane_thickness", s.membrane_thickness},
          {"background_level", s.background_level},
          {"membrane_level", s.membrane_level},
          {"seed", s.seed},
          {"allow_clipping", s.allow_clipping}};
}

nlohmann::json to_json(const DegradationSpec& s) {
  return {{"sigma0", s.sigma0},
          {"sigma1", s.sigma1},
          {"axial_factor", s.axial_factor},
          {"axial_blur_sigma", s.axial_blur_sigma},
          {"seed", s.seed}};
}

PhantomSpec phantom_spec_from_json(const nlohmann::json& j) {
  PhantomSpec s;
  const auto& d = j.at("dims");
  s.dims = Dims{d.at(0).get<int>(), d.at(1).get<int>(), d.at(2).get<int>()};
  s.num_cells = j.at("num_cells").get<int>();
  s.radius_min = j.at("radius_range").at(0).get<double>();
  s.radius_max = j.at("radius_range").at(1).get<double>();
  s.membrane_thickness = j.at("membrane_thickness").get<double>();
  s.background_level = j.at("background_level").get<double>();
  s.membrane_level = j.at("membrane_level").get<double>();
  s.seed = j.at("seed").get<std::uint64_t>();
  s.allow_clipping = j.value("allow_clipping", false);
  return s;
}

DegradationSpec degradation_spec_from_json(const nlohmann::json& j) {
  DegradationSpec s;
  s.sigma0 = j.at("sigma0").get<double>();
  s.sigma1 = j.at("sigma1").get<double>();
  s.axial_factor = j.at("axial_factor").get<int>();
  s.axial_blur_sigma = j.at("axial_blur_sigma").get<double>();
  s.seed = j.at("seed").get<std::uint64_t>();
  return s;
}

void write_manifest(const DatasetManifest& m, const std::filesystem::path& path) {
  nlohmann::json entries = nlohmann::json::array();
  for (const auto& e : m.entries) {
    entries.push_back({{"clean_path", e.clean_path},
                       {"degraded_path", e.degraded_path},
                       {"phantom_spec", to_json(e.phantom_spec)},
                       {"degradation_spec", to_json(e.degradation_spec)},
                       {"split", e.split}});
  }
  nlohmann::json j = {{"format_version", m.format_version},
                      {"entries", entries},
                      {"split", {{"train", m.train}, {"eval", m.eval}}}};
  std::ofstream out(path, std::ios::trunc);
  if (!out) throw IoError("cannot write manifest '" + path.string() + "'");
  out << j.dump(2) << '\n';
  if (!out) throw IoError("write failed for manifest '" + path.string() + "'");
}

DatasetManifest read_manifest(const std::filesystem::path& path) {
  std::ifstream in(path);
  if (!in) throw IoError("cannot open manifest '" + path.string() + "'");
  DatasetManifest m;
  try {
    const auto j = nlohmann::json::parse(in);
    m.format_version = j.at("format_version").get<int>();
    for (const auto& e : j.at("entries")) {
      ManifestEntry me;
      me.clean_path = e.at("clean_path").get<std::string>();
      me.degraded_path = e.at("degraded_path").get<std::string>();
      me.phantom_spec = phantom_spec_from_json(e.at("phantom_spec"));
      me.degradation_spec = degradation_spec_from_json(e.at("degradation_spec"));
      me.split = e.value("split", "");
      m.entries.push_back(std::move(me));
    }
    m.train = j.at("split").at("train").get<std::vector<int>>();
    m.eval = j.at("split").at("eval").get<std::vector<int>>();
  } catch (const nlohmann::json::exception& e) {
    throw FormatError("malformed manifest '" + path.string() + "': " + e.what());
  }
  if (m.format_version != 1)
    throw FormatError("manifest format_version " + std::to_string(m.format_version) + " unsupported (expected 1)");
  const int n = static_cast<int>(m.entries.size());
  for (int i : m.train)
    if (i < 0 || i >= n) throw FormatError("manifest split index out of range");
  for (int i : m.eval)
    if (i < 0 || i >= n) throw FormatError("manifest split index out of range");
  m.root = path.parent_path();
  return m;
}

DatasetManifest build_dataset(int n, const PhantomSpec& pspec, const DegradationSpec& dspec,
                              const std::filesystem::path& out_dir) {
  if (n < 0) throw ValidationError("dataset size must be >= 0");
  pspec.validate();
  dspec.validate();
  if (pspec.dims.c % dspec.axial_factor != 0)
    throw DimensionError("axial factor " + std::to_string(dspec.axial_factor) + " does not divide C=" +
                         std::to_string(pspec.dims.c));
  std::error_code ec;
  std::filesystem::create_directories(out_dir, ec);
  if (ec) throw IoError("cannot create '" + out_dir.string() + "': " + ec.message());

  DatasetManifest m;
  m.root = out_dir;
  const int n_train = n > 0 ? std::max(1, (n * 4) / 5) : 0;
  for (int i = 0; i < n; ++i) {
    PhantomSpec ps = pspec;
    ps.seed = pspec.seed + static_cast<std::uint64_t>(i);
    DegradationSpec ds = dspec;
    ds.seed = dspec.seed + static_cast<std::uint64_t>(i);
    char name[64];
    std::snprintf(name, sizeof name, "clean_%04d.vtcd", i);
    const std::string clean_name = name;
    std::snprintf(name, sizeof name, "degraded_%04d.vtcd", i);
    const std::string deg_name = name;

    const Volume3D clean = generate_phantom(ps);
    save_volume(clean, out_dir / clean_name);
    save_volume(degrade_volume(clean, ds), out_dir / deg_name);

    const bool train = i < n_train;
    m.entries.push_back({clean_name, deg_name, ps, ds, train ? "train" : "eval"});
    (train ? m.train : m.eval).push_back(i);
  }
  write_manifest(m, out_dir / "manifest.json");
  return m;
}

}  // namespace vtcd
