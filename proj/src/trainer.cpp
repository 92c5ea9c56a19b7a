#include "ctun/trainer.hpp"

#include <algorithm>
#include <cmath>
#include <complex>
#include <cstdio>
#include <fstream>
#include <numbers>
#include <numeric>
#include <random>

#if defined(__SSE2__)
#include <xmmintrin.h>
#endif

#include "ctun/autograd.hpp"
#include "ctun/data.hpp"
#include "ctun/error.hpp"
#include "ctun/metrics.hpp"
#include "ctun/ops.hpp"
#include "op_helpers.hpp"

namespace ctun {

using detail::require_same_shape;

Tensor charbonnier_loss(const Tensor& pred, const Tensor& target, double eps) {
  if (!(eps > 0.0)) throw ValueError("charbonnier_loss: eps must be > 0");
  require_same_shape(pred, target, "charbonnier_loss");
  const Tensor d = sub(pred, target);
  return mean(sqrt_(add_scalar(mul(d, d), eps * eps)));
}

namespace {

using Complex = std::complex<double>;

bool power_of_two(int v) { return v > 0 && (v & (v - 1)) == 0; }

// Plain product; std::complex's operator* adds NaN recovery calls.
inline Complex cmul(Complex a, Complex b) {
  return {a.real() * b.real() - a.imag() * b.imag(), a.real() * b.imag() + a.imag() * b.real()};
}

struct FftPlan {
  int n = 0;
  std::vector<int> rev;     // bit-reversal permutation
  std::vector<Complex> tw;  // exp(-2 pi i k / n), k < n/2

  explicit FftPlan(int size) : n(size), rev(size), tw(size / 2) {
    for (int i = 1, j = 0; i < n; ++i) {
      int bit = n >> 1;
      for (; j & bit; bit >>= 1) j ^= bit;
      j ^= bit;
      rev[i] = j;
    }
    for (int k = 0; k < n / 2; ++k) tw[k] = std::polar(1.0, -2.0 * std::numbers::pi * k / n);
  }
};

// In-place iterative radix-2 forward transform of n contiguous values.
void fft1d(Complex* a, const FftPlan& plan) {
  const int n = plan.n;
  for (int i = 1; i < n; ++i)
    if (i < plan.rev[i]) std::swap(a[i], a[plan.rev[i]]);
  for (int len = 2, step = n / 2; len <= n; len <<= 1, step >>= 1) {
    const int half = len / 2;
    for (int i = 0; i < n; i += len)
      for (int k = 0; k < half; ++k) {
        const Complex u = a[i + k];
        const Complex v = cmul(a[i + k + half], plan.tw[k * step]);
        a[i + k] = u + v;
        a[i + k + half] = u - v;
      }
  }
}

// Transforms every column of an h x w row-major plane at once: each
// butterfly combines two whole rows.
void fft_columns(Complex* p, int w, const FftPlan& plan) {
  const int h = plan.n;
  const auto row = [&](int y) { return p + static_cast<std::size_t>(y) * w; };
  for (int i = 1; i < h; ++i)
    if (i < plan.rev[i]) std::swap_ranges(row(i), row(i) + w, row(plan.rev[i]));
  for (int len = 2, step = h / 2; len <= h; len <<= 1, step >>= 1) {
    const int half = len / 2;
    for (int i = 0; i < h; i += len)
      for (int k = 0; k < half; ++k) {
        const Complex wk = plan.tw[k * step];
        Complex* u = row(i + k);
        Complex* v = row(i + k + half);
        for (int x = 0; x < w; ++x) {
          const Complex t = cmul(v[x], wk);
          v[x] = u[x] - t;
          u[x] = u[x] + t;
        }
      }
  }
}

// Row transforms, then column transforms, of an h x w row-major plane.
void fft2d_plane(std::vector<Complex>& p, int h, int w) {
  const FftPlan rows(w), cols(h);
  for (int y = 0; y < h; ++y) fft1d(p.data() + static_cast<std::size_t>(y) * w, rows);
  fft_columns(p.data(), w, cols);
}

}  // namespace

Tensor fft2d_stacked(const Tensor& x) {
  const Shape s = x.shape();
  if (!power_of_two(s.h) || !power_of_two(s.w))
    throw DimensionError("fft2d: spatial size " + std::to_string(s.h) + "x" + std::to_string(s.w) +
                         " is not a power of two");
  const DType dt = x.dtype();
  const Shape out_shape{s.n, 2 * s.c, s.h, s.w};
  const std::size_t plane = s.plane();
  Buffer out(dt, out_shape.numel());
  dispatch(dt, [&]<class T>() {
    auto xi = x.data<T>();
    auto o = out.span<T>();
    std::vector<Complex> p(plane);
    for (int n = 0; n < s.n; ++n)
      for (int c = 0; c < s.c; ++c) {
        const std::size_t src = (static_cast<std::size_t>(n) * s.c + c) * plane;
        for (std::size_t i = 0; i < plane; ++i) p[i] = Complex(xi[src + i], 0.0);
        fft2d_plane(p, s.h, s.w);
        const std::size_t re = (static_cast<std::size_t>(n) * 2 * s.c + c) * plane;
        const std::size_t im = re + static_cast<std::size_t>(s.c) * plane;
        for (std::size_t i = 0; i < plane; ++i) {
          o[re + i] = static_cast<T>(p[i].real());
          o[im + i] = static_cast<T>(p[i].imag());
        }
      }
  });
  Tensor res = make_result(out_shape, std::move(out), {x}, nullptr, "fft2d");
  // For real x, d/dx of <g_re, Re F x> + <g_im, Im F x> is Re F(g_re - i g_im),
  // since the DFT matrix is symmetric.
  detail::attach_backward(res, [s, dt, plane](const Buffer& gout) {
    std::vector<Buffer> grads(1);
    grads[0] = Buffer(dt, s.numel());
    dispatch(dt, [&]<class T>() {
      auto g = gout.span<T>();
      auto gx = grads[0].span<T>();
      std::vector<Complex> p(plane);
      for (int n = 0; n < s.n; ++n)
        for (int c = 0; c < s.c; ++c) {
          const std::size_t re = (static_cast<std::size_t>(n) * 2 * s.c + c) * plane;
          const std::size_t im = re + static_cast<std::size_t>(s.c) * plane;
          for (std::size_t i = 0; i < plane; ++i) p[i] = Complex(g[re + i], -g[im + i]);
          fft2d_plane(p, s.h, s.w);
          const std::size_t dst = (static_cast<std::size_t>(n) * s.c + c) * plane;
          for (std::size_t i = 0; i < plane; ++i) gx[dst + i] = static_cast<T>(p[i].real());
        }
    });
    return grads;
  });
  return res;
}

std::pair<Tensor, Tensor> fft2d(const Tensor& x) {
  const int c = x.shape().c;
  const std::vector<int> sizes{c, c};
  auto parts = split_channels(fft2d_stacked(x), sizes);
  return {parts[0], parts[1]};
}

Tensor fft_loss(const Tensor& pred, const Tensor& target) {
  require_same_shape(pred, target, "fft_loss");
  return mean(abs_(sub(fft2d_stacked(pred), fft2d_stacked(target))));
}

void adam_step(ParamStore& params, AdamState& state, double lr, double beta1, double beta2,
               double eps) {
  if (!(beta1 >= 0.0 && beta1 < 1.0 && beta2 >= 0.0 && beta2 < 1.0))
    throw ValueError("adam_step: betas must lie in [0, 1)");
  if (!(eps > 0.0)) throw ValueError("adam_step: eps must be > 0");
  auto& entries = params.entries();
  if (state.m.empty()) {
    for (const auto& [name, t] : entries) {
      state.m.emplace_back(t.numel(), 0.0);
      state.v.emplace_back(t.numel(), 0.0);
    }
  }
  if (state.m.size() != entries.size()) throw ValueError("adam_step: state does not match parameters");

  std::vector<std::vector<double>> grads(entries.size());
  for (std::size_t i = 0; i < entries.size(); ++i) {
    const auto& [name, t] = entries[i];
    if (state.m[i].size() != t.numel())
      throw ValueError("adam_step: state size mismatch for '" + name + "'");
    grads[i] = t.has_grad() ? t.grad().to_vector() : std::vector<double>(t.numel(), 0.0);
    for (double g : grads[i])
      if (!std::isfinite(g)) throw NumericError("adam_step: non-finite gradient in '" + name + "'");
  }

  ++state.step;
  const double c1 = 1.0 - std::pow(beta1, static_cast<double>(state.step));
  const double c2 = 1.0 - std::pow(beta2, static_cast<double>(state.step));
  for (std::size_t i = 0; i < entries.size(); ++i) {
    Tensor t = entries[i].second;
    auto& m = state.m[i];
    auto& v = state.v[i];
    dispatch(t.dtype(), [&]<class T>() {
      auto p = t.mutable_data<T>();
      for (std::size_t j = 0; j < p.size(); ++j) {
        const double g = grads[i][j];
        m[j] = beta1 * m[j] + (1.0 - beta1) * g;
        v[j] = beta2 * v[j] + (1.0 - beta2) * g * g;
        const double mh = m[j] / c1, vh = v[j] / c2;
        p[j] = static_cast<T>(p[j] - lr * mh / (std::sqrt(vh) + eps));
      }
    });
  }
}

double cosine_lr(std::int64_t t, std::int64_t total, double lr0, double lr_min) {
  if (total < 0) throw ValueError("cosine_lr: total iterations must be >= 0");
  if (t < 0 || t > total)
    throw ValueError("cosine_lr: step " + std::to_string(t) + " outside [0, " +
                     std::to_string(total) + "]");
  if (total == 0) return lr0;
  const double frac = static_cast<double>(t) / static_cast<double>(total);
  return lr_min + 0.5 * (lr0 - lr_min) * (1.0 + std::cos(std::numbers::pi * frac));
}

Motion parse_motion(const std::string& s) {
  if (s == "shift") return Motion::shift;
  if (s == "rotate" || s == "rotate-pattern") return Motion::rotate;
  throw ValueError("unknown motion '" + s + "' (expected shift or rotate)");
}

const char* to_string(Motion m) { return m == Motion::shift ? "shift" : "rotate"; }

FrameSequence make_synthetic_sequence(int n, int h, int w, const SyntheticSpec& spec) {
  if (n < 1) throw ValueError("synthetic sequence needs at least one frame");
  if (h < 4 || w < 4 || h % 4 != 0 || w % 4 != 0)
    throw DimensionError("synthetic frame size " + std::to_string(h) + "x" + std::to_string(w) +
                         " must be a positive multiple of 4");
  constexpr int kWaves = 4;
  constexpr double kWaveAmp = 0.08, kCheckerAmp = 0.1, kCheckerPeriod = 12.0;
  std::mt19937_64 rng(spec.seed);
  std::uniform_real_distribution<double> freq(0.03, 0.2), angle(0.0, std::numbers::pi),
      phase(0.0, 2.0 * std::numbers::pi);
  double fx[kWaves], fy[kWaves], ph[kWaves][3];
  for (int k = 0; k < kWaves; ++k) {
    const double f = freq(rng), a = angle(rng);
    fx[k] = 2.0 * std::numbers::pi * f * std::cos(a);
    fy[k] = 2.0 * std::numbers::pi * f * std::sin(a);
    for (double& p : ph[k]) p = phase(rng);
  }
  const double cx = 0.5 * (w - 1), cy = 0.5 * (h - 1);

  FrameSequence seq;
  seq.source = "synthetic";
  const std::size_t plane = static_cast<std::size_t>(h) * w;
  for (int t = 0; t < n; ++t) {
    std::vector<double> v(3 * plane);
    const double ca = std::cos(spec.omega * t), sa = std::sin(spec.omega * t);
    for (int y = 0; y < h; ++y)
      for (int x = 0; x < w; ++x) {
        double u, q;
        if (spec.motion == Motion::shift) {
          u = x - spec.vx * t;
          q = y - spec.vy * t;
        } else {
          u = cx + ca * (x - cx) + sa * (y - cy);
          q = cy - sa * (x - cx) + ca * (y - cy);
        }
        const double s = std::sin(std::numbers::pi * u / kCheckerPeriod) *
                         std::sin(std::numbers::pi * q / kCheckerPeriod);
        const double checker = kCheckerAmp * ((s > 0.0) - (s < 0.0));
        for (int c = 0; c < 3; ++c) {
          double val = 0.5 + checker;
          for (int k = 0; k < kWaves; ++k) val += kWaveAmp * std::sin(fx[k] * u + fy[k] * q + ph[k][c]);
          v[c * plane + static_cast<std::size_t>(y) * w + x] = val;
        }
      }
    seq.frames.push_back(Tensor::from_values(Shape{1, 3, h, w}, v));
  }
  return seq;
}

void TrainConfig::validate() const {
  auto fail = [](const std::string& m) { throw ValueError("train config: " + m); };
  if (!(lr0 > 0.0) || !std::isfinite(lr0)) fail("lr0 must be > 0");
  if (!(lr_min >= 0.0) || lr_min > lr0) fail("lr_min must lie in [0, lr0]");
  if (!(beta1 >= 0.0 && beta1 < 1.0) || !(beta2 >= 0.0 && beta2 < 1.0))
    fail("betas must lie in [0, 1)");
  if (!(adam_eps > 0.0)) fail("adam_eps must be > 0");
  if (iters < 0) fail("iters must be >= 0");
  if (!power_of_two(patch)) fail("patch must be a power of two, got " + std::to_string(patch));
  if (batch < 1) fail("batch must be >= 1");
  if (frames < 1) fail("frames must be >= 1");
  if (lr_size < patch) fail("lr_size must be >= patch");
  if (sequences < 1) fail("sequences must be >= 1");
  if (!(charbonnier_eps > 0.0)) fail("charbonnier_eps must be > 0");
  if (!(fft_weight >= 0.0)) fail("fft_weight must be >= 0");
}

CtunConfig desk_model_config() {
  CtunConfig cfg;
  cfg.channels = 16;
  cfg.blocks = BlockCounts{1, 2, 1};
  return cfg;
}

std::vector<TrainingClip> make_training_data(const CtunConfig& cfg, const TrainConfig& tc) {
  cfg.validate();
  tc.validate();
  DegradationSpec deg;
  deg.mode = DegradationMode::BI;
  deg.scale = cfg.scale;
  const int hr = tc.lr_size * cfg.scale;
  std::vector<TrainingClip> clips;
  for (int i = 0; i < tc.sequences; ++i) {
    SyntheticSpec spec;
    spec.motion = i % 2 == 0 ? Motion::shift : Motion::rotate;
    spec.seed = tc.seed * 7919 + static_cast<std::uint64_t>(i);
    TrainingClip clip;
    clip.hr = make_synthetic_sequence(tc.frames, hr, hr, spec);
    clip.lr = degrade(clip.hr, deg);
    clips.push_back(std::move(clip));
  }
  return clips;
}

namespace {

// Stacks same-position crops of frame t from several clips into one batch.
Tensor gather_patches(const std::vector<TrainingClip>& clips, const std::vector<int>& clip_idx,
                      const std::vector<std::pair<int, int>>& origin, int t, int size, bool hr) {
  const int b = static_cast<int>(clip_idx.size());
  const std::size_t plane = static_cast<std::size_t>(size) * size;
  std::vector<double> v(static_cast<std::size_t>(b) * 3 * plane);
  for (int i = 0; i < b; ++i) {
    const Tensor& f = hr ? clips[clip_idx[i]].hr.frames[t] : clips[clip_idx[i]].lr.frames[t];
    const Shape s = f.shape();
    auto data = f.data<float>();
    for (int c = 0; c < 3; ++c)
      for (int y = 0; y < size; ++y)
        for (int x = 0; x < size; ++x)
          v[(static_cast<std::size_t>(i) * 3 + c) * plane + static_cast<std::size_t>(y) * size + x] =
              data[detail::index4(s, 0, c, origin[i].first + y, origin[i].second + x)];
  }
  return Tensor::from_values(Shape{b, 3, size, size}, v);
}

}  // namespace

void write_train_csv(const std::vector<TrainLogRow>& log, const std::filesystem::path& path) {
  std::ofstream os(path);
  if (!os) throw IoError("cannot write " + path.string());
  os << "iteration,charbonnier,fft,total,lr\n";
  char line[256];
  for (const auto& r : log) {
    std::snprintf(line, sizeof line, "%d,%.9g,%.9g,%.9g,%.9g\n", r.iteration, r.charbonnier, r.fft,
                  r.total, r.lr);
    os << line;
  }
  if (!os) throw IoError("failed writing " + path.string());
}

namespace {

// Flush subnormal floats to zero for the lifetime of the guard. Saturated
// gates push gradients into the subnormal range late in training, where
// x86 arithmetic on them is very slow.
class FlushDenormals {
 public:
#if defined(__SSE2__)
  FlushDenormals() : saved_(_mm_getcsr()) { _mm_setcsr(saved_ | 0x8040); }  // FTZ | DAZ
  ~FlushDenormals() { _mm_setcsr(saved_); }

 private:
  unsigned saved_;
#endif
};

}  // namespace

TrainResult train_loop(const CtunConfig& cfg, const TrainConfig& tc, const TrainOutputs& out) {
  const FlushDenormals flush;
  const std::vector<TrainingClip> clips = make_training_data(cfg, tc);
  TrainResult result;
  result.params = init_params(cfg, tc.seed);
  ParamStore& params = result.params;
  params.set_requires_grad(true);
  AdamState adam;

  std::mt19937_64 rng(tc.seed ^ 0x5deece66dULL);
  // Clips are dealt from a reshuffled deck, so every clip appears equally
  // often and window means do not carry clip-selection noise.
  std::vector<int> deck;
  auto next_clip = [&] {
    if (deck.empty()) {
      deck.resize(tc.sequences);
      std::iota(deck.begin(), deck.end(), 0);
      std::shuffle(deck.begin(), deck.end(), rng);
    }
    const int c = deck.back();
    deck.pop_back();
    return c;
  };
  std::uniform_int_distribution<int> pick_pos(0, tc.lr_size - tc.patch);
  const int hr_patch = tc.patch * cfg.scale;

  TrainLogRow window;
  int in_window = 0;
  for (int it = 0; it < tc.iters; ++it) {
    const double lr = cosine_lr(it, tc.iters, tc.lr0, tc.lr_min);
    std::vector<int> clip_idx(tc.batch);
    std::vector<std::pair<int, int>> lr_origin(tc.batch), hr_origin(tc.batch);
    for (int b = 0; b < tc.batch; ++b) {
      clip_idx[b] = next_clip();
      const int y = pick_pos(rng), x = pick_pos(rng);
      lr_origin[b] = {y, x};
      hr_origin[b] = {y * cfg.scale, x * cfg.scale};
    }

    params.zero_grad();
    Tensor charb_sum, fft_sum;
    run_sequence(
        tc.frames,
        [&](int t) { return gather_patches(clips, clip_idx, lr_origin, t, tc.patch, false); },
        [&](int t, Tensor y) {
          const Tensor target = gather_patches(clips, clip_idx, hr_origin, t, hr_patch, true);
          const Tensor lc = charbonnier_loss(y, target, tc.charbonnier_eps);
          const Tensor lf = fft_loss(y, target);
          charb_sum = charb_sum.defined() ? add(charb_sum, lc) : lc;
          fft_sum = fft_sum.defined() ? add(fft_sum, lf) : lf;
        },
        params, cfg);
    const double inv_n = 1.0 / tc.frames;
    const Tensor total = scale(add(charb_sum, scale(fft_sum, tc.fft_weight)), inv_n);
    const double total_v = total.item();
    if (!std::isfinite(total_v))
      throw NumericError("training loss is not finite at iteration " + std::to_string(it));
    backward(total);
    adam_step(params, adam, lr, tc.beta1, tc.beta2, tc.adam_eps);

    window.charbonnier += charb_sum.item() * inv_n;
    window.fft += fft_sum.item() * inv_n;
    window.total += total_v;
    window.lr = lr;
    ++in_window;
    if ((it + 1) % kLogWindow == 0 || it + 1 == tc.iters) {
      window.iteration = it + 1;
      window.charbonnier /= in_window;
      window.fft /= in_window;
      window.total /= in_window;
      result.loss_history.push_back(window.total);
      result.log.push_back(window);
      if (out.on_log) out.on_log(window);
      window = TrainLogRow{};
      in_window = 0;
    }
  }
  params.zero_grad();
  params.set_requires_grad(false);

  if (out.weights) save_weights(params, *out.weights);
  if (out.csv) write_train_csv(result.log, *out.csv);
  return result;
}

namespace {

Tensor clamp01(const Tensor& x) {
  std::vector<double> v = x.to_vector();
  for (double& e : v) e = std::clamp(e, 0.0, 1.0);
  return Tensor::from_values(x.shape(), v, x.dtype());
}

}  // namespace

FitReport evaluate_fit(const CtunConfig& cfg, const ParamStore& params,
                       const std::vector<TrainingClip>& clips, int border) {
  if (clips.empty()) throw ValueError("evaluate_fit: no clips");
  NoGradGuard no_grad;
  FitReport r;
  for (const auto& clip : clips) {
    FrameSequence sr = super_resolve_sequence(clip.lr, params, cfg);
    FrameSequence bic;
    for (auto& f : sr.frames) f = clamp01(f);
    for (const auto& f : clip.lr.frames) bic.frames.push_back(clamp01(bicubic_resize(f, cfg.scale)));
    const QualityScores qs = y_quality(sr, clip.hr, border);
    const QualityScores qb = y_quality(bic, clip.hr, border);
    r.sr_psnr += qs.psnr;
    r.sr_ssim += qs.ssim;
    r.bicubic_psnr += qb.psnr;
    r.bicubic_ssim += qb.ssim;
  }
  const double k = static_cast<double>(clips.size());
  r.sr_psnr /= k;
  r.sr_ssim /= k;
  r.bicubic_psnr /= k;
  r.bicubic_ssim /= k;
  return r;
}

}  // namespace ctun
