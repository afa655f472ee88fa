#include "vtcd/metrics.hpp"

#include <algorithm>
#include <array>
#include <cmath>
#include <fstream>

#include "vtcd/error.hpp"
#include "vtcd/losses.hpp"

namespace vtcd {

namespace {

constexpr int kWin = 11;

const std::array<double, kWin>& window_taps() {
  static const std::array<double, kWin> taps = [] {
    std::array<double, kWin> t{};
    double sum = 0.0;
    for (int i = 0; i < kWin; ++i) {
      const double d = i - kWin / 2;
      t[i] = std::exp(-d * d / (2.0 * 1.5 * 1.5));
      sum += t[i];
    }
    for (auto& x : t) x /= sum;
    return t;
  }();
  return taps;
}

// Separable valid-region filter of a rows x cols array.
std::vector<double> filter_valid(const std::vector<double>& x, int rows, int cols) {
  const auto& k = window_taps();
  const int orows = rows - kWin + 1, ocols = cols - kWin + 1;
  std::vector<double> tmp(static_cast<std::size_t>(rows) * ocols, 0.0);
  for (int r = 0; r < rows; ++r)
    for (int c = 0; c < ocols; ++c) {
      double s = 0.0;
      for (int i = 0; i < kWin; ++i) s += k[i] * x[static_cast<std::size_t>(r) * cols + c + i];
      tmp[static_cast<std::size_t>(r) * ocols + c] = s;
    }
  std::vector<double> out(static_cast<std::size_t>(orows) * ocols, 0.0);
  for (int r = 0; r < orows; ++r)
    for (int c = 0; c < ocols; ++c) {
      double s = 0.0;
      for (int i = 0; i < kWin; ++i) s += k[i] * tmp[static_cast<std::size_t>(r + i) * ocols + c];
      out[static_cast<std::size_t>(r) * ocols + c] = s;
    }
  return out;
}

template <class T>
double psnr_impl(std::span<const T> pred, std::span<const T> ref, double range) {
  if (pred.size() != ref.size()) throw DimensionError("psnr: size mismatch");
  if (!(range > 0.0)) throw ValidationError("psnr: range must be positive");
  if (pred.empty()) throw DimensionError("psnr: empty input");
  double acc = 0.0;
  for (std::size_t i = 0; i < pred.size(); ++i) {
    const double d = static_cast<double>(pred[i]) - static_cast<double>(ref[i]);
    acc += d * d;
  }
  const double mse = acc / static_cast<double>(pred.size());
  if (mse == 0.0) return kPsnrCap;
  return std::min(kPsnrCap, 10.0 * std::log10(range * range / mse));
}

std::vector<double> to_doubles(std::span<const float> x) { return {x.begin(), x.end()}; }

double mean_of(const std::vector<double>& v) {
  double s = 0.0;
  for (double x : v) s += x;
  return v.empty() ? 0.0 : s / static_cast<double>(v.size());
}

nlohmann::json metrics_json(const VolumeMetrics& m) {
  nlohmann::json planes = nlohmann::json::object();
  for (const auto& [p, pm] : m.planes)
    planes[std::string(to_string(p))] = {{"psnr_db", pm.psnr_db}, {"ssim", pm.ssim}};
  return {{"id", m.id}, {"psnr_db", m.psnr_db}, {"ssim", m.ssim}, {"tv_in", m.tv_in}, {"tv_out", m.tv_out},
          {"planes", planes}};
}

VolumeMetrics metrics_from_json(const nlohmann::json& j) {
  VolumeMetrics m;
  m.id = j.at("id").get<std::string>();
  m.psnr_db = j.at("psnr_db").get<double>();
  m.ssim = j.at("ssim").get<double>();
  m.tv_in = j.at("tv_in").get<double>();
  m.tv_out = j.at("tv_out").get<double>();
  if (j.contains("planes"))
    for (const auto& [k, v] : j.at("planes").items())
      m.planes[parse_plane(k)] = {v.at("psnr_db").get<double>(), v.at("ssim").get<double>()};
  return m;
}

nlohmann::json entries_json(const std::vector<VolumeMetrics>& entries) {
  nlohmann::json per = nlohmann::json::array();
  for (const auto& e : entries) per.push_back(metrics_json(e));
  nlohmann::json agg = nullptr;
  if (!entries.empty()) {
    agg = nlohmann::json::object();
    for (const auto& [name, a] : aggregates(entries))
      agg[name] = {{"mean", a.mean}, {"median", a.median}, {"std", a.std}};
  }
  return {{"per_volume", per}, {"aggregates", agg}};
}

std::vector<VolumeMetrics> entries_from_json(const nlohmann::json& j) {
  std::vector<VolumeMetrics> out;
  for (const auto& e : j.at("per_volume")) out.push_back(metrics_from_json(e));
  return out;
}

}  // namespace

double psnr(std::span<const double> pred, std::span<const double> ref, double range) {
  return psnr_impl(pred, ref, range);
}
double psnr(std::span<const float> pred, std::span<const float> ref, double range) {
  return psnr_impl(pred, ref, range);
}
double psnr(const Image2D& pred, const Image2D& ref, double range) {
  if (pred.rows != ref.rows || pred.cols != ref.cols) throw DimensionError("psnr: shape mismatch");
  return psnr(std::span<const float>(pred.data), std::span<const float>(ref.data), range);
}
double psnr(const Volume3D& pred, const Volume3D& ref, double range) {
  if (!(pred.dims() == ref.dims())) throw DimensionError("psnr: volume dims differ");
  return psnr(pred.data(), ref.data(), range);
}

double ssim(std::span<const double> a, std::span<const double> b, int rows, int cols, double range) {
  if (a.size() != b.size() || a.size() != static_cast<std::size_t>(rows) * cols)
    throw DimensionError("ssim: shape mismatch");
  if (rows < kWin || cols < kWin)
    throw DimensionError("ssim: image " + std::to_string(rows) + "x" + std::to_string(cols) +
                         " smaller than the 11x11 window");
  if (!(range > 0.0)) throw ValidationError("ssim: range must be positive");
  const double c1 = (0.01 * range) * (0.01 * range);
  const double c2 = (0.03 * range) * (0.03 * range);
  const std::vector<double> va(a.begin(), a.end()), vb(b.begin(), b.end());
  std::vector<double> aa(va.size()), bb(va.size()), ab(va.size());
  for (std::size_t i = 0; i < va.size(); ++i) {
    aa[i] = va[i] * va[i];
    bb[i] = vb[i] * vb[i];
    ab[i] = va[i] * vb[i];
  }
  const auto ma = filter_valid(va, rows, cols), mb = filter_valid(vb, rows, cols);
  const auto faa = filter_valid(aa, rows, cols), fbb = filter_valid(bb, rows, cols), fab = filter_valid(ab, rows, cols);
  double acc = 0.0;
  for (std::size_t i = 0; i < ma.size(); ++i) {
    const double mu_ab = ma[i] * mb[i];
    const double va_ = faa[i] - ma[i] * ma[i];
    const double vb_ = fbb[i] - mb[i] * mb[i];
    const double cov = fab[i] - mu_ab;
    const double num = (2.0 * mu_ab + c1) * (2.0 * cov + c2);
    const double den = (ma[i] * ma[i] + mb[i] * mb[i] + c1) * (va_ + vb_ + c2);
    acc += num / den;
  }
  return acc / static_cast<double>(ma.size());
}

double ssim(const Image2D& a, const Image2D& b, double range) {
  if (a.rows != b.rows || a.cols != b.cols) throw DimensionError("ssim: shape mismatch");
  const auto da = to_doubles(a.data), db = to_doubles(b.data);
  return ssim(da, db, a.rows, a.cols, range);
}

double tv_statistic(const Volume3D& vol) { return tv_loss(to_tensor(vol)); }

Aggregate aggregate(std::span<const double> values) {
  if (values.empty()) throw ValidationError("aggregate of an empty set");
  std::vector<double> v(values.begin(), values.end());
  Aggregate a;
  a.mean = mean_of(v);
  double ss = 0.0;
  for (double x : v) ss += (x - a.mean) * (x - a.mean);
  a.std = std::sqrt(ss / static_cast<double>(v.size()));
  std::sort(v.begin(), v.end());
  const std::size_t n = v.size();
  a.median = n % 2 ? v[n / 2] : 0.5 * (v[n / 2 - 1] + v[n / 2]);
  return a;
}

std::map<std::string, Aggregate> aggregates(const std::vector<VolumeMetrics>& entries) {
  std::map<std::string, Aggregate> out;
  if (entries.empty()) return out;
  std::map<std::string, std::vector<double>> cols;
  for (const auto& e : entries) {
    cols["psnr_db"].push_back(e.psnr_db);
    cols["ssim"].push_back(e.ssim);
    cols["tv_in"].push_back(e.tv_in);
    cols["tv_out"].push_back(e.tv_out);
  }
  for (const auto& [k, v] : cols) out[k] = aggregate(v);
  return out;
}

VolumeMetrics evaluate_volume(const Volume3D& pred, const Volume3D& gt, const std::vector<PlaneId>& planes,
                              const std::string& id, const Volume3D* input) {
  if (!(pred.dims() == gt.dims()))
    throw DimensionError("evaluate: prediction " + to_string(pred.dims()) + " vs ground truth " +
                         to_string(gt.dims()));
  const double range = gt.range().hi - gt.range().lo;
  VolumeMetrics m;
  m.id = id;
  m.psnr_db = psnr(pred, gt, range);
  m.tv_in = tv_statistic(input ? *input : gt);
  m.tv_out = tv_statistic(pred);
  std::vector<double> xy;
  for (int z = 0; z < gt.dims().c; ++z) xy.push_back(ssim(xy_slice(pred, z), xy_slice(gt, z), range));
  m.ssim = mean_of(xy);
  for (PlaneId p : planes) {
    const SliceSet sp = slice_volume(pred, p, 1), sg = slice_volume(gt, p, 1);
    std::vector<double> ps, ss;
    for (std::size_t i = 0; i < sp.slices.size(); ++i) {
      ps.push_back(psnr(sp.slices[i], sg.slices[i], range));
      ss.push_back(ssim(sp.slices[i], sg.slices[i], range));
    }
    m.planes[p] = {mean_of(ps), mean_of(ss)};
  }
  return m;
}

nlohmann::json to_json(const MetricsReport& r) {
  nlohmann::json j = entries_json(r.per_volume);
  j["baseline"] = r.baseline ? entries_json(*r.baseline) : nlohmann::json(nullptr);
  return j;
}

MetricsReport report_from_json(const nlohmann::json& j) {
  try {
    MetricsReport r;
    r.per_volume = entries_from_json(j);
    if (j.contains("baseline") && !j.at("baseline").is_null()) r.baseline = entries_from_json(j.at("baseline"));
    return r;
  } catch (const nlohmann::json::exception& e) {
    throw FormatError(std::string("metrics report: ") + e.what());
  }
}

void write_report(const MetricsReport& r, const std::filesystem::path& path) {
  std::ofstream os(path);
  if (!os) throw IoError("cannot open " + path.string() + " for writing");
  os << to_json(r).dump(2) << '\n';
  if (!os) throw IoError("failed writing " + path.string());
}

MetricsReport read_report(const std::filesystem::path& path) {
  std::ifstream is(path);
  if (!is) throw IoError("cannot open " + path.string());
  nlohmann::json j;
  try {
    is >> j;
  } catch (const nlohmann::json::exception& e) {
    throw FormatError(std::string("metrics report: ") + e.what());
  }
  return report_from_json(j);
}

}  // namespace vtcd
