#pragma once

#include <cstdint>
#include <filesystem>
#include <functional>
#include <optional>
#include <string>
#include <utility>
#include <vector>

#include "ctun/frames.hpp"
#include "ctun/model.hpp"
#include "ctun/tensor.hpp"

namespace ctun {

/// Mean over elements of sqrt((pred - target)^2 + eps^2).
Tensor charbonnier_loss(const Tensor& pred, const Tensor& target, double eps = 1e-3);

/// Unnormalized 2-D DFT of every [H, W] plane by row-column radix-2 FFT.
/// H and W must be powers of two. Returns (re, im), each shaped like x.
std::pair<Tensor, Tensor> fft2d(const Tensor& x);
// Real parts in channels [0, C), imaginary parts in [C, 2C).
Tensor fft2d_stacked(const Tensor& x);

/// Mean absolute difference of the stacked real and imaginary spectra.
Tensor fft_loss(const Tensor& pred, const Tensor& target);

struct AdamState {
  std::vector<std::vector<double>> m, v;
  std::int64_t step = 0;
};

/// One bias-corrected Adam update of every parameter in place, using the
/// gradients accumulated on the tensors (a missing gradient counts as zero).
/// Throws NumericError naming the parameter if any gradient is not finite;
/// nothing is updated in that case.
void adam_step(ParamStore& params, AdamState& state, double lr, double beta1, double beta2,
               double eps = 1e-8);

/// lr_min + (lr0 - lr_min) (1 + cos(pi t / T)) / 2 for 0 <= t <= T.
double cosine_lr(std::int64_t t, std::int64_t total, double lr0, double lr_min = 0.0);

enum class Motion { shift, rotate };

Motion parse_motion(const std::string& s);
const char* to_string(Motion m);

struct SyntheticSpec {
  Motion motion = Motion::shift;
  // HR pixels per frame for shift, radians per frame for rotate.
  double vx = 0.75, vy = 0.5;
  double omega = 0.02;
  std::uint64_t seed = 0;
};

/// Oriented sinusoids plus a checkerboard, evaluated at continuously
/// translated or rotated coordinates; RGB float32 in [0, 1]. H and W must be
/// multiples of 4.
FrameSequence make_synthetic_sequence(int n, int h, int w, const SyntheticSpec& spec);

struct TrainConfig {
  double lr0 = 2e-4;
  double lr_min = 0.0;
  double beta1 = 0.9, beta2 = 0.99;
  double adam_eps = 1e-8;
  int iters = 2000;
  int patch = 32;  // LR patch side
  int batch = 2;
  int frames = 8;
  int lr_size = 32;  // LR side of the synthetic training sequences
  int sequences = 2;
  double charbonnier_eps = 1e-3;
  double fft_weight = 0.1;
  std::uint64_t seed = 0;

  void validate() const;
};

// Channels 16, blocks {1, 2, 1}.
CtunConfig desk_model_config();

struct TrainingClip {
  FrameSequence hr, lr;
};

/// Synthetic sequences (alternating shift and rotate motion, seeded from
/// tc.seed) and their bicubic LR versions.
std::vector<TrainingClip> make_training_data(const CtunConfig& cfg, const TrainConfig& tc);

// Means over one logging window.
struct TrainLogRow {
  int iteration = 0;  // iterations completed
  double charbonnier = 0.0;
  double fft = 0.0;
  double total = 0.0;
  double lr = 0.0;
};

inline constexpr int kLogWindow = 100;

struct TrainResult {
  ParamStore params;
  // Mean total loss of each 100-iteration window; ceil(iters / 100) entries.
  std::vector<double> loss_history;
  std::vector<TrainLogRow> log;
};

struct TrainOutputs {
  std::optional<std::filesystem::path> weights;
  std::optional<std::filesystem::path> csv;
  std::function<void(const TrainLogRow&)> on_log;
};

/// Trains from init_params(cfg, tc.seed) on make_training_data(cfg, tc).
/// Each iteration draws `batch` random (clip, LR patch) pairs with matching
/// HR patches; the loss is Charbonnier + fft_weight * FFT loss, averaged over
/// output frames. Throws NumericError naming the iteration on a non-finite
/// loss.
TrainResult train_loop(const CtunConfig& cfg, const TrainConfig& tc, const TrainOutputs& out = {});

void write_train_csv(const std::vector<TrainLogRow>& log, const std::filesystem::path& path);

struct FitReport {
  double sr_psnr = 0.0;
  double bicubic_psnr = 0.0;
  double sr_ssim = 0.0;
  double bicubic_ssim = 0.0;
};

/// Y-channel quality of the network and of bicubic x scale on the full
/// training clips, outputs clamped to [0, 1], `border` HR pixels cropped.
FitReport evaluate_fit(const CtunConfig& cfg, const ParamStore& params,
                       const std::vector<TrainingClip>& clips, int border = 4);

}  // namespace ctun
