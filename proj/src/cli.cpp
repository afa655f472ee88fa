#include "vtcd/cli.hpp"

#include <algorithm>
#include <cstdlib>
#include <iostream>
#include <sstream>

#include <Eigen/Core>
#include <opencv2/core.hpp>
#include <opencv2/imgcodecs.hpp>
#include <opencv2/imgproc.hpp>

#include "CLI11.hpp"
#include "vtcd/error.hpp"
#include "vtcd/metrics.hpp"
#include "vtcd/phantom.hpp"
#include "vtcd/trainer.hpp"

namespace vtcd {

namespace {

std::vector<std::string> split(const std::string& s, char sep) {
  std::vector<std::string> out;
  std::stringstream ss(s);
  std::string part;
  while (std::getline(ss, part, sep)) out.push_back(part);
  return out;
}

double parse_double(const std::string& s, const std::string& what) {
  try {
    std::size_t pos = 0;
    const double v = std::stod(s, &pos);
    if (pos != s.size()) throw std::invalid_argument(s);
    return v;
  } catch (const std::logic_error&) {
    throw ValidationError("cannot parse " + what + " value '" + s + "'");
  }
}

Dims parse_size(const std::string& s) {
  const auto parts = split(s, 'x');
  if (parts.size() != 3) throw ValidationError("--size must look like HxWxC, got '" + s + "'");
  Dims d;
  int* dst[3] = {&d.h, &d.w, &d.c};
  for (int i = 0; i < 3; ++i) {
    const double v = parse_double(parts[i], "--size");
    if (v < 1 || v != std::floor(v)) throw ValidationError("--size entries must be positive integers");
    *dst[i] = static_cast<int>(v);
  }
  return d;
}

std::pair<double, double> parse_pair(const std::string& s, const std::string& what) {
  const auto parts = split(s, ',');
  if (parts.size() != 2) throw ValidationError(what + " expects two comma-separated numbers, got '" + s + "'");
  return {parse_double(parts[0], what), parse_double(parts[1], what)};
}

void require_file(const std::string& path) {
  if (!std::filesystem::exists(path)) throw IoError("no such file: " + path);
}

struct GenArgs {
  std::string out, size = "64x64x32", noise = "0.02,0.08", radius, thickness;
  int count = 0, cells = 5, scale = 4;
  double blur = 1.0;
  std::uint64_t seed = 0;
};

void cmd_gen(const GenArgs& a, std::ostream& out) {
  PhantomSpec ps;
  ps.dims = parse_size(a.size);
  ps.num_cells = a.cells;
  ps.seed = a.seed;
  ps.allow_clipping = true;
  const int min_dim = std::min({ps.dims.h, ps.dims.w, ps.dims.c});
  ps.radius_max = 0.3125 * min_dim;
  ps.radius_min = 0.6 * ps.radius_max;
  ps.membrane_thickness = 0.3 * ps.radius_max;
  if (!a.radius.empty()) std::tie(ps.radius_min, ps.radius_max) = parse_pair(a.radius, "--radius");
  if (!a.thickness.empty()) ps.membrane_thickness = parse_double(a.thickness, "--thickness");
  DegradationSpec ds;
  std::tie(ds.sigma0, ds.sigma1) = parse_pair(a.noise, "--noise");
  ds.axial_factor = a.scale;
  ds.axial_blur_sigma = a.blur;
  ds.seed = a.seed + 0x5DEECE66DULL;
  const auto m = build_dataset(a.count, ps, ds, a.out);
  out << "wrote " << m.entries.size() << " volume pairs (" << m.train.size() << " train, " << m.eval.size()
      << " eval) to " << a.out << '\n';
}

void cmd_train(const std::string& data, const std::string& config, const std::string& out_dir,
               const std::string& resume, std::ostream& out) {
  require_file(data);
  require_file(config);
  const DatasetManifest m = read_manifest(data);
  const TrainConfig cfg = load_train_config(config);
  TrainOptions opts;
  if (!resume.empty()) {
    require_file(resume);
    opts.resume = resume;
  }
  const Checkpoint ck = train(cfg, m, out_dir, opts);
  out << "trained " << ck.completed_epochs << " epochs (" << ck.global_step << " steps); checkpoint "
      << (std::filesystem::path(out_dir) / "final.vtck").string() << '\n';
}

void cmd_restore(const std::string& ckpt, const std::string& in, const std::string& outp, bool dn_only, bool sr_only,
                 std::ostream& out) {
  require_file(ckpt);
  require_file(in);
  const Checkpoint ck = load_checkpoint(ckpt);
  const Volume3D v = load_volume(in);
  const RestoreMode mode = dn_only ? RestoreMode::DenoiseOnly : sr_only ? RestoreMode::SrOnly : RestoreMode::Full;
  const Volume3D r = restore_volume(ck, v, mode);
  save_volume(r, outp);
  out << "restored " << to_string(v.dims()) << " -> " << to_string(r.dims()) << " into " << outp << '\n';
}

void cmd_eval(const std::string& pred, const std::string& gt, const std::string& report, const std::string& planes,
              const std::string& baseline, const std::string& input, std::ostream& out) {
  require_file(pred);
  require_file(gt);
  std::vector<PlaneId> ps;
  for (const auto& p : split(planes, ','))
    if (!p.empty()) ps.push_back(parse_plane(p));
  const Volume3D g = load_volume(gt);
  std::optional<Volume3D> in;
  if (!input.empty()) {
    require_file(input);
    in = load_volume(input);
  }
  MetricsReport r;
  const std::string id = std::filesystem::path(pred).stem().string();
  r.per_volume.push_back(evaluate_volume(load_volume(pred), g, ps, id, in ? &*in : nullptr));
  if (!baseline.empty()) {
    require_file(baseline);
    r.baseline = std::vector<VolumeMetrics>{
        evaluate_volume(load_volume(baseline), g, ps, std::filesystem::path(baseline).stem().string(),
                        in ? &*in : nullptr)};
  }
  write_report(r, report);
  out << "psnr " << r.per_volume[0].psnr_db << " dB, ssim " << r.per_volume[0].ssim << "; report " << report
      << '\n';
}

void draw_text(cv::Mat& img, const std::string& s, cv::Point at, double scale = 0.45) {
  cv::putText(img, s, at, cv::FONT_HERSHEY_SIMPLEX, scale, cv::Scalar(30, 30, 30), 1, cv::LINE_AA);
}

// Two panels: PSNR bars (with baseline bars when present) and SSIM lines.
void cmd_plot(const std::string& report, const std::string& png, std::ostream& out) {
  require_file(report);
  const MetricsReport r = read_report(report);
  const int W = 900, H = 600, left = 70, right = 30, top = 40, panel = 220, gap = 70;
  cv::Mat img(H, W, CV_8UC3, cv::Scalar(255, 255, 255));
  const std::size_t n = r.per_volume.size();
  const bool has_base = r.baseline && r.baseline->size() == n;
  draw_text(img, "per-volume PSNR (dB)", {left, top - 12}, 0.55);
  draw_text(img, "per-volume SSIM", {left, top + panel + gap - 12}, 0.55);
  for (int p = 0; p < 2; ++p) {
    const int y0 = top + p * (panel + gap);
    cv::rectangle(img, {left, y0}, {W - right, y0 + panel}, cv::Scalar(160, 160, 160));
  }
  if (n == 0) {
    draw_text(img, "report has no entries", {left + 20, top + panel / 2});
  } else {
    double pmax = 1.0;
    for (std::size_t i = 0; i < n; ++i) {
      pmax = std::max(pmax, r.per_volume[i].psnr_db);
      if (has_base) pmax = std::max(pmax, (*r.baseline)[i].psnr_db);
    }
    pmax *= 1.1;
    const double slot = static_cast<double>(W - left - right) / static_cast<double>(n);
    const int bw = std::max(2, static_cast<int>(slot * (has_base ? 0.35 : 0.6)));
    std::vector<cv::Point> ssim_pts, base_pts;
    for (std::size_t i = 0; i < n; ++i) {
      const int cx = left + static_cast<int>(slot * (static_cast<double>(i) + 0.5));
      auto bar = [&](double v, int x, cv::Scalar col) {
        const int h = static_cast<int>(panel * std::clamp(v / pmax, 0.0, 1.0));
        cv::rectangle(img, {x, top + panel - h}, {x + bw, top + panel}, col, cv::FILLED);
      };
      if (has_base) {
        bar(r.per_volume[i].psnr_db, cx - bw, cv::Scalar(180, 110, 40));
        bar((*r.baseline)[i].psnr_db, cx, cv::Scalar(80, 80, 200));
      } else {
        bar(r.per_volume[i].psnr_db, cx - bw / 2, cv::Scalar(180, 110, 40));
      }
      if (n <= 20) draw_text(img, r.per_volume[i].id, {cx - bw, top + panel + 16}, 0.35);
      const int sy0 = top + panel + gap;
      auto ypos = [&](double s) { return sy0 + panel - static_cast<int>(panel * std::clamp((s + 1.0) / 2.0, 0.0, 1.0)); };
      ssim_pts.emplace_back(cx, ypos(r.per_volume[i].ssim));
      if (has_base) base_pts.emplace_back(cx, ypos((*r.baseline)[i].ssim));
    }
    draw_text(img, "max " + std::to_string(pmax).substr(0, 5), {5, top + 12}, 0.35);
    for (const auto* pts : {&ssim_pts, &base_pts}) {
      const cv::Scalar col = pts == &ssim_pts ? cv::Scalar(180, 110, 40) : cv::Scalar(80, 80, 200);
      for (std::size_t i = 0; i + 1 < pts->size(); ++i) cv::line(img, (*pts)[i], (*pts)[i + 1], col, 2, cv::LINE_AA);
      for (const auto& pt : *pts) cv::circle(img, pt, 4, col, cv::FILLED, cv::LINE_AA);
    }
    if (has_base) {
      draw_text(img, "restored", {W - 200, top + 16});
      cv::rectangle(img, {W - 220, top + 6}, {W - 208, top + 18}, cv::Scalar(180, 110, 40), cv::FILLED);
      draw_text(img, "baseline", {W - 110, top + 16});
      cv::rectangle(img, {W - 130, top + 6}, {W - 118, top + 18}, cv::Scalar(80, 80, 200), cv::FILLED);
    }
  }
  if (!cv::imwrite(png, img)) throw IoError("cannot write image " + png);
  out << "wrote " << png << '\n';
}

int classify(const std::exception& e) {
  if (dynamic_cast<const ValidationError*>(&e) || dynamic_cast<const FormatError*>(&e) ||
      dynamic_cast<const DimensionError*>(&e) || dynamic_cast<const ConfigError*>(&e) ||
      dynamic_cast<const IoError*>(&e))
    return 1;
  return 2;
}

}  // namespace

void apply_thread_env() {
  if (const char* s = std::getenv("VTCD_NUM_THREADS")) {
    const int n = std::atoi(s);
    if (n > 0) Eigen::setNbThreads(n);
  }
}

int run_cli(const std::vector<std::string>& args, std::ostream& out, std::ostream& err) {
  CLI::App app{"Dual cycle-consistent diffusion restoration of anisotropic volumes", "vtcd"};
  app.require_subcommand(1);

  GenArgs gen;
  auto* g = app.add_subcommand("gen-data", "generate a phantom dataset and manifest");
  g->add_option("--out", gen.out, "output directory")->required();
  g->add_option("--count", gen.count, "number of volume pairs")->required()->check(CLI::NonNegativeNumber);
  g->add_option("--size", gen.size, "clean volume size HxWxC")->capture_default_str();
  g->add_option("--cells", gen.cells, "cells per phantom")->capture_default_str();
  g->add_option("--scale", gen.scale, "axial downscale factor s")->capture_default_str();
  g->add_option("--noise", gen.noise, "noise std at first,last LR slice")->capture_default_str();
  g->add_option("--seed", gen.seed, "base seed")->capture_default_str();
  g->add_option("--radius", gen.radius, "cell semi-axis range min,max (default scales with size)");
  g->add_option("--thickness", gen.thickness, "membrane thickness (default scales with size)");
  g->add_option("--blur", gen.blur, "axial blur sigma in HR voxels")->capture_default_str();

  std::string data, config, out_dir, resume;
  auto* t = app.add_subcommand("train", "train all phases");
  t->add_option("--data", data, "dataset manifest.json")->required();
  t->add_option("--config", config, "training config JSON")->required();
  t->add_option("--out", out_dir, "checkpoint directory")->required();
  t->add_option("--resume", resume, "checkpoint to continue from");

  std::string ckpt, in, outv;
  bool dn_only = false, sr_only = false;
  auto* r = app.add_subcommand("restore", "denoise then super-resolve a degraded volume");
  r->add_option("--ckpt", ckpt, "checkpoint file")->required();
  r->add_option("--in", in, "degraded volume")->required();
  r->add_option("--out", outv, "output volume")->required();
  auto* f_dn = r->add_flag("--denoise-only", dn_only, "skip super-resolution");
  auto* f_sr = r->add_flag("--sr-only", sr_only, "skip denoising");
  f_dn->excludes(f_sr);

  std::string pred, gt, report, planes = "xy,xz,yz", baseline, input;
  auto* e = app.add_subcommand("eval", "full-reference metrics against ground truth");
  e->add_option("--pred", pred, "restored volume")->required();
  e->add_option("--gt", gt, "ground-truth volume")->required();
  e->add_option("--report", report, "output report JSON")->required();
  e->add_option("--planes", planes, "comma-separated planes (may be empty)")->capture_default_str();
  e->add_option("--baseline", baseline, "second prediction stored as the report baseline");
  e->add_option("--input", input, "degraded input for the tv_in statistic");

  std::string preport, png;
  auto* p = app.add_subcommand("plot", "render a metrics report to PNG");
  p->add_option("--report", preport, "report JSON")->required();
  p->add_option("--out", png, "output PNG")->required();

  std::vector<std::string> rev(args.rbegin(), args.rend());
  try {
    app.parse(rev);
  } catch (const CLI::CallForHelp&) {
    out << app.help();
    return 0;
  } catch (const CLI::CallForAllHelp&) {
    out << app.help("", CLI::AppFormatMode::All);
    return 0;
  } catch (const CLI::ParseError& pe) {
    std::string msg = pe.what();
    std::replace(msg.begin(), msg.end(), '\n', ' ');
    err << "error: " << msg << '\n';
    return 1;
  }

  try {
    apply_thread_env();
    if (*g) cmd_gen(gen, out);
    if (*t) cmd_train(data, config, out_dir, resume, out);
    if (*r) cmd_restore(ckpt, in, outv, dn_only, sr_only, out);
    if (*e) cmd_eval(pred, gt, report, planes, baseline, input, out);
    if (*p) cmd_plot(preport, png, out);
  } catch (const std::exception& ex) {
    std::string msg = ex.what();
    std::replace(msg.begin(), msg.end(), '\n', ' ');
    err << "error: " << msg << '\n';
    return classify(ex);
  }
  return 0;
}

int run_cli(int argc, char** argv) {
  std::vector<std::string> args;
  for (int i = 1; i < argc; ++i) args.emplace_back(argv[i]);
  return run_cli(args, std::cout, std::cerr);
}

}  // namespace vtcd
