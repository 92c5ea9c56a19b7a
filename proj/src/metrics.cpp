#include "ctun/metrics.hpp"

#include <chrono>
#include <cmath>
#include <iomanip>
#include <random>
#include <sstream>

#include "json.hpp"

#include "ctun/alloc_meter.hpp"
#include "ctun/autograd.hpp"
#include "ctun/data.hpp"
#include "ctun/error.hpp"
#include "ctun/ops.hpp"

namespace ctun {

double psnr(const Tensor& a, const Tensor& b, double peak) {
  if (!(a.shape() == b.shape()))
    throw DimensionError("psnr: shapes " + a.shape().str() + " and " + b.shape().str() + " differ");
  const std::vector<double> x = a.to_vector(), y = b.to_vector();
  double se = 0.0;
  for (std::size_t i = 0; i < x.size(); ++i) se += (x[i] - y[i]) * (x[i] - y[i]);
  if (se == 0.0) return kPsnrCap;
  return 10.0 * std::log10(peak * peak / (se / static_cast<double>(x.size())));
}

namespace {

constexpr int kWin = 11;

// 'valid' separable filtering of an h x w plane with a symmetric 1-D window.
std::vector<double> filter_valid(const std::vector<double>& img, int h, int w,
                                 const std::vector<double>& win) {
  const int k = static_cast<int>(win.size());
  const int ho = h - k + 1, wo = w - k + 1;
  std::vector<double> rows(static_cast<std::size_t>(h) * wo);
  for (int y = 0; y < h; ++y)
    for (int x = 0; x < wo; ++x) {
      double acc = 0.0;
      for (int i = 0; i < k; ++i) acc += win[i] * img[static_cast<std::size_t>(y) * w + x + i];
      rows[static_cast<std::size_t>(y) * wo + x] = acc;
    }
  std::vector<double> out(static_cast<std::size_t>(ho) * wo);
  for (int y = 0; y < ho; ++y)
    for (int x = 0; x < wo; ++x) {
      double acc = 0.0;
      for (int i = 0; i < k; ++i) acc += win[i] * rows[static_cast<std::size_t>(y + i) * wo + x];
      out[static_cast<std::size_t>(y) * wo + x] = acc;
    }
  return out;
}

std::vector<double> ssim_window() {
  std::vector<double> g(kWin);
  double total = 0.0;
  for (int i = 0; i < kWin; ++i) total += g[i] = std::exp(-((i - 5) * (i - 5)) / (2.0 * 1.5 * 1.5));
  for (double& v : g) v /= total;
  return g;
}

}  // namespace

double ssim(const Tensor& a, const Tensor& b) {
  if (!(a.shape() == b.shape()))
    throw DimensionError("ssim: shapes " + a.shape().str() + " and " + b.shape().str() + " differ");
  const Shape& s = a.shape();
  if (s.n != 1 || s.c != 1) throw DimensionError("ssim expects a single-channel image, got " + s.str());
  if (s.h < kWin || s.w < kWin)
    throw DimensionError("ssim: image " + std::to_string(s.h) + "x" + std::to_string(s.w) +
                         " is smaller than the 11x11 window");
  const double c1 = (0.01 * 255.0) * (0.01 * 255.0);
  const double c2 = (0.03 * 255.0) * (0.03 * 255.0);
  const std::vector<double> x = a.to_vector(), y = b.to_vector();
  std::vector<double> xx(x.size()), yy(x.size()), xy(x.size());
  for (std::size_t i = 0; i < x.size(); ++i) {
    xx[i] = x[i] * x[i];
    yy[i] = y[i] * y[i];
    xy[i] = x[i] * y[i];
  }
  const auto win = ssim_window();
  const auto mx = filter_valid(x, s.h, s.w, win), my = filter_valid(y, s.h, s.w, win);
  const auto sxx = filter_valid(xx, s.h, s.w, win), syy = filter_valid(yy, s.h, s.w, win),
             sxy = filter_valid(xy, s.h, s.w, win);
  double total = 0.0;
  for (std::size_t i = 0; i < mx.size(); ++i) {
    const double vx = sxx[i] - mx[i] * mx[i], vy = syy[i] - my[i] * my[i], cov = sxy[i] - mx[i] * my[i];
    total += ((2 * mx[i] * my[i] + c1) * (2 * cov + c2)) /
             ((mx[i] * mx[i] + my[i] * my[i] + c1) * (vx + vy + c2));
  }
  return total / static_cast<double>(mx.size());
}

QualityScores y_quality(const Tensor& pred, const Tensor& ref, int border) {
  if (!(pred.shape() == ref.shape()))
    throw DimensionError("quality: shapes " + pred.shape().str() + " and " + ref.shape().str() +
                         " differ");
  Tensor yp = rgb_to_y(pred), yr = rgb_to_y(ref);
  if (border > 0) {
    const Shape s = yp.shape();
    if (2 * border >= s.h || 2 * border >= s.w) throw ValueError("border crop leaves no pixels");
    yp = crop(yp, border, border, s.h - 2 * border, s.w - 2 * border);
    yr = crop(yr, border, border, s.h - 2 * border, s.w - 2 * border);
  }
  return {psnr(yp, yr), ssim(yp, yr)};
}

QualityScores y_quality(const FrameSequence& pred, const FrameSequence& ref, int border) {
  if (pred.size() != ref.size() || pred.empty())
    throw DimensionError("quality: sequences hold " + std::to_string(pred.size()) + " and " +
                         std::to_string(ref.size()) + " frames");
  QualityScores mean_scores;
  for (std::size_t i = 0; i < pred.size(); ++i) {
    const auto q = y_quality(pred.frames[i], ref.frames[i], border);
    mean_scores.psnr += q.psnr;
    mean_scores.ssim += q.ssim;
  }
  mean_scores.psnr /= static_cast<double>(pred.size());
  mean_scores.ssim /= static_cast<double>(pred.size());
  return mean_scores;
}

Tensor temporal_profile(const FrameSequence& seq, int row) {
  seq.validate();
  const int h = seq.height(), w = seq.width(), n = static_cast<int>(seq.size());
  if (row < 0 || row >= h)
    throw ValueError("profile row " + std::to_string(row) + " outside [0, " + std::to_string(h) + ")");
  std::vector<double> out(static_cast<std::size_t>(3) * n * w);
  for (int t = 0; t < n; ++t) {
    const std::vector<double> f = seq.frames[t].to_vector();
    for (int c = 0; c < 3; ++c)
      for (int x = 0; x < w; ++x)
        out[(static_cast<std::size_t>(c) * n + t) * w + x] = f[(static_cast<std::size_t>(c) * h + row) * w + x];
  }
  return Tensor::from_values(Shape{1, 3, n, w}, out, seq.frames[0].dtype());
}

FlopCount count_flops_detailed(const CtunConfig& cfg, int h, int w) {
  cfg.validate();
  if (h < 1 || w < 1) throw ValueError("count_flops: frame size must be positive");
  FlopCount f;
  const std::uint64_t p = static_cast<std::uint64_t>(h) * w;
  for (const auto& row : describe(cfg)) f.conv += row.flops_per_pixel * p + row.flops_fixed;

  const std::uint64_t c = cfg.channels, cp = c * p;
  const std::uint64_t s2 = static_cast<std::uint64_t>(cfg.scale) * cfg.scale;
  const std::uint64_t res_block = 2 * cp;                 // relu + skip add
  const std::uint64_t spatial_gate = 3 * cp + 4 * p;      // mean, max, gate multiply, sigmoid
  const std::uint64_t seb = cp + spatial_gate + cp;       // leaky_relu, gate, skip add
  std::uint64_t other = 0;
  other += cfg.blocks.extractor * res_block;
  other += 3 * 8 * cp + 2 * cp + 3 * seb;                 // ICAM: norms, carries, SEBs
  other += 2 * 4 * cp + 3 * cp;                           // gate fusion
  other += cfg.blocks.propagation * res_block;
  other += cp + cp + spatial_gate + cp;                   // encoder: pool, scale, gate, skip
  other += cfg.reduced_channels() + 4 * c;                // pooled relu + sigmoid
  other += 2 * 4 * cp + 5 * cp + 6 * cp;                  // U-GRU gates and combination
  other += cfg.blocks.reconstruction * res_block;
  other += 7 * 3 * s2 * p + 3 * s2 * p;                   // bilinear skip and final add
  f.other = other;
  return f;
}

std::uint64_t count_flops(const CtunConfig& cfg, int h, int w) {
  return count_flops_detailed(cfg, h, w).total();
}

namespace {

struct RunStats {
  std::uint64_t stage_macs[5] = {0, 0, 0, 0, 0};
  int stage_runs[5] = {0, 0, 0, 0, 0};
  double seconds = 0.0;
  std::size_t peak = 0;

  std::uint64_t steady_frame_macs() const {
    std::uint64_t total = 0;
    for (int s = 0; s < 5; ++s)
      if (stage_runs[s] > 0) total += stage_macs[s] / static_cast<std::uint64_t>(stage_runs[s]);
    return total;
  }
};

RunStats run_synthetic(const CtunConfig& cfg, const ParamStore& params, int n, int h, int w,
                       std::uint64_t seed) {
  if (n < 1 || h < 1 || w < 1) throw ValueError("profile: frame count and size must be positive");
  const DType dt = params.entries().empty() ? DType::f32 : params.entries().front().second.dtype();
  NoGradGuard no_grad;
  RunStats stats;
  auto& meter = AllocationMeter::global();
  meter.reset_peak();
  const std::size_t base = meter.live_bytes();
  const auto start = std::chrono::steady_clock::now();
  run_sequence(
      n,
      [&](int i) {
        std::mt19937_64 rng(seed * 1000003ULL + static_cast<std::uint64_t>(i));
        return Tensor::uniform(Shape{1, 3, h, w}, rng, 0.0, 1.0, dt);
      },
      [](int, Tensor) {}, params, cfg,
      [&](const StageEvent& e) {
        stats.stage_macs[static_cast<int>(e.stage)] += e.macs;
        stats.stage_runs[static_cast<int>(e.stage)] += 1;
      });
  stats.seconds = std::chrono::duration<double>(std::chrono::steady_clock::now() - start).count();
  stats.peak = meter.peak_bytes() - base;
  return stats;
}

}  // namespace

std::uint64_t measure_frame_macs(const CtunConfig& cfg, const ParamStore& params, int n, int h,
                                 int w) {
  if (n < 2) throw ValueError("measure_frame_macs needs at least two frames for a hidden update");
  return run_synthetic(cfg, params, n, h, w, 0).steady_frame_macs();
}

ProfileReport profile_inference(const CtunConfig& cfg, const ParamStore& params, int n, int h,
                                int w, std::uint64_t seed) {
  const RunStats stats = run_synthetic(cfg, params, n, h, w, seed);
  const FlopCount flops = count_flops_detailed(cfg, h, w);
  ProfileReport r;
  r.params = param_count(cfg);
  r.flops_analytic = flops.total();
  r.flops_conv = flops.conv;
  r.macs_measured = stats.steady_frame_macs();
  r.peak_bytes = stats.peak;
  r.wall_ms_per_frame = stats.seconds * 1000.0 / n;
  r.frames = n;
  r.height = h;
  r.width = w;
  return r;
}

std::string ProfileReport::to_text() const {
  std::ostringstream os;
  auto line = [&](const char* key, const std::string& value) {
    os << std::left << std::setw(20) << key << std::right << std::setw(18) << value << '\n';
  };
  std::ostringstream ms;
  ms << std::fixed << std::setprecision(3) << wall_ms_per_frame;
  line("frames", std::to_string(frames) + " @ " + std::to_string(height) + "x" + std::to_string(width));
  line("params", std::to_string(params));
  line("flops_analytic", std::to_string(flops_analytic));
  line("flops_conv", std::to_string(flops_conv));
  line("macs_measured", std::to_string(macs_measured));
  line("peak_bytes", std::to_string(peak_bytes));
  line("wall_ms_per_frame", ms.str());
  return os.str();
}

std::string ProfileReport::to_json() const {
  nlohmann::ordered_json j;
  j["params"] = params;
  j["flops_analytic"] = flops_analytic;
  j["flops_conv"] = flops_conv;
  j["macs_measured"] = macs_measured;
  j["peak_bytes"] = peak_bytes;
  j["wall_ms_per_frame"] = wall_ms_per_frame;
  j["frames"] = frames;
  j["height"] = height;
  j["width"] = width;
  return j.dump(2);
}

}  // namespace ctun
