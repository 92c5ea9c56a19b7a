#pragma once

#include <cstdint>
#include <string>

#include "ctun/frames.hpp"
#include "ctun/model.hpp"
#include "ctun/tensor.hpp"

namespace ctun {

// Returned for identical inputs.
inline constexpr double kPsnrCap = 99.0;

/// 10 log10(peak^2 / MSE) over all elements.
double psnr(const Tensor& a, const Tensor& b, double peak = 255.0);

/// Single-scale SSIM of two single-channel images in 0-255 units: 11x11
/// Gaussian window (sigma 1.5), K1 = 0.01, K2 = 0.03, L = 255, averaged over
/// window positions that fit entirely inside the image.
double ssim(const Tensor& a, const Tensor& b);

struct QualityScores {
  double psnr = 0.0;
  double ssim = 0.0;
};

// Y-channel PSNR/SSIM of RGB frames in [0, 1]. `border` pixels are dropped
// from every edge first.
QualityScores y_quality(const Tensor& pred, const Tensor& ref, int border = 0);
// Mean over frames.
QualityScores y_quality(const FrameSequence& pred, const FrameSequence& ref, int border = 0);

/// Row `row` of every frame, stacked top to bottom: [1, 3, N, W].
Tensor temporal_profile(const FrameSequence& seq, int row);

struct FlopCount {
  std::uint64_t conv = 0;
  // Elementwise, activation, normalization and resampling work.
  std::uint64_t other = 0;
  std::uint64_t total() const { return conv + other; }
};

/// Analytic FLOPs of one steady-state timestep (extractor on one frame, ICAM,
/// propagation, hidden update, reconstruction) for an H x W LR frame.
/// Convolutions cost 2 * kh * kw * Cin * Cout per output pixel. Per-element
/// costs of the other ops: add/sub/mul/relu/leaky_relu 1, sigmoid 4, tanh 5,
/// layer_norm 8, channel mean/max 1 per input element, global average pool 1
/// per input element, bilinear 7 per output element.
FlopCount count_flops_detailed(const CtunConfig& cfg, int h, int w);
std::uint64_t count_flops(const CtunConfig& cfg, int h, int w);

/// Runs a sequence of N frames and returns the conv MACs of one steady-state
/// timestep, taken from per-stage means of the instrumented counter (the
/// hidden update runs N-1 times, every other stage N times).
std::uint64_t measure_frame_macs(const CtunConfig& cfg, const ParamStore& params, int n, int h,
                                 int w);

struct ProfileReport {
  std::size_t params = 0;
  std::uint64_t flops_analytic = 0;  // all ops, per frame
  std::uint64_t flops_conv = 0;      // conv subset, per frame
  std::uint64_t macs_measured = 0;   // per steady-state frame
  std::size_t peak_bytes = 0;        // peak live tensor payload above the starting level
  double wall_ms_per_frame = 0.0;
  int frames = 0, height = 0, width = 0;

  std::string to_text() const;
  std::string to_json() const;
};

/// Streams N synthetic random frames (seeded) through the network without
/// recording a graph; inputs are generated on demand and outputs dropped, so
/// the peak reflects the pipeline's own working set.
ProfileReport profile_inference(const CtunConfig& cfg, const ParamStore& params, int n, int h,
                                int w, std::uint64_t seed = 0);

}  // namespace ctun
