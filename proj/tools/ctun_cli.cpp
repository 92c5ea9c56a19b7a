#include <chrono>
#include <cstdio>
#include <filesystem>
#include <fstream>
#include <iostream>
#include <optional>
#include <string>

#include "CLI11.hpp"

#include "ctun/autograd.hpp"
#include "ctun/config_file.hpp"
#include "ctun/data.hpp"
#include "ctun/error.hpp"
#include "ctun/gradcheck_suite.hpp"
#include "ctun/metrics.hpp"
#include "ctun/model.hpp"
#include "ctun/ops.hpp"
#include "ctun/trainer.hpp"

namespace fs = std::filesystem;
using namespace ctun;

namespace {

constexpr int kExitRuntime = 1;
constexpr int kExitUsage = 2;

// Bad flag values or combinations found after parsing.
class UsageError : public std::runtime_error {
 public:
  using std::runtime_error::runtime_error;
};

std::pair<int, int> parse_size(const std::string& s) {
  const auto x = s.find_first_of("xX");
  try {
    if (x == std::string::npos) throw std::invalid_argument(s);
    std::size_t used_h = 0, used_w = 0;
    const int h = std::stoi(s.substr(0, x), &used_h);
    const int w = std::stoi(s.substr(x + 1), &used_w);
    if (used_h != x || used_w != s.size() - x - 1 || h < 1 || w < 1) throw std::invalid_argument(s);
    return {h, w};
  } catch (const std::logic_error&) {
    throw UsageError("--size expects HxW with positive integers, got '" + s + "'");
  }
}

void load_config_file(const std::optional<std::string>& path, CtunConfig& model, TrainConfig& train) {
  if (path) apply_config(read_key_values(*path), model, train);
}

// ---------------------------------------------------------------------------

struct DegradeArgs {
  std::string in, out, mode = "bi";
  int scale = 4;
  std::optional<double> sigma;
};

int cmd_degrade(const DegradeArgs& a) {
  DegradationSpec spec;
  spec.mode = parse_degradation_mode(a.mode);
  spec.scale = a.scale;
  if (a.sigma) {
    if (spec.mode != DegradationMode::BD) throw UsageError("--sigma only applies to --mode bd");
    spec.sigma = *a.sigma;
  }
  spec.validate();
  const FrameSequence hr = load_sequence(a.in);
  const FrameSequence lr = degrade(hr, spec);
  save_sequence(lr, a.out);
  std::printf("degraded %zu frames (%s, x%d", hr.size(), to_string(spec.mode), spec.scale);
  if (spec.mode == DegradationMode::BD) std::printf(", sigma %.3g", spec.sigma);
  std::printf("): %dx%d -> %dx%d, written to %s\n", hr.height(), hr.width(), lr.height(), lr.width(),
              a.out.c_str());
  return 0;
}

// ---------------------------------------------------------------------------

struct SrArgs {
  std::string in, out, weights;
  std::optional<std::string> config, ugru;
};

int cmd_sr(const SrArgs& a) {
  const ParamStore params = load_weights(a.weights);
  CtunConfig cfg;
  if (a.config) {
    TrainConfig unused;
    load_config_file(a.config, cfg, unused);
  } else {
    cfg = infer_model_config(params);
  }
  if (a.ugru) cfg.ugru_variant = parse_ugru_variant(*a.ugru);
  cfg.validate();
  check_params(cfg, params);

  const FrameSequence lr = load_sequence(a.in);
  fs::create_directories(a.out);
  NoGradGuard no_grad;
  auto last = std::chrono::steady_clock::now();
  double total_ms = 0.0;
  run_sequence(
      static_cast<int>(lr.size()), [&](int i) { return lr.frames[i]; },
      [&](int i, Tensor y) {
        save_png(y, fs::path(a.out) / frame_filename(i));
        const auto now = std::chrono::steady_clock::now();
        const double ms = std::chrono::duration<double, std::milli>(now - last).count();
        last = now;
        total_ms += ms;
        std::printf("frame %d: %.2f ms\n", i, ms);
      },
      params, cfg);
  std::printf("super-resolved %zu frames %dx%d -> %dx%d (%s), mean %.2f ms/frame\n", lr.size(),
              lr.height(), lr.width(), lr.height() * cfg.scale, lr.width() * cfg.scale,
              to_string(cfg.ugru_variant), total_ms / static_cast<double>(lr.size()));
  return 0;
}

// ---------------------------------------------------------------------------

struct EvalArgs {
  std::string pred, gt;
  bool y_channel = false;
  int crop_border = 4;
};

// RGB scores in 0-255 units: PSNR over all channels, SSIM averaged per channel.
QualityScores rgb_quality(const Tensor& pred, const Tensor& ref, int border) {
  const Shape s = pred.shape();
  if (!(s == ref.shape()))
    throw DimensionError("frame shapes " + s.str() + " and " + ref.shape().str() + " differ");
  if (2 * border >= s.h || 2 * border >= s.w) throw ValueError("border crop leaves no pixels");
  const int h = s.h - 2 * border, w = s.w - 2 * border;
  const Tensor p = scale(crop(pred, border, border, h, w), 255.0);
  const Tensor r = scale(crop(ref, border, border, h, w), 255.0);
  QualityScores q;
  q.psnr = psnr(p, r);
  const std::vector<int> ones{1, 1, 1};
  const auto pc = split_channels(p, ones), rc = split_channels(r, ones);
  for (int c = 0; c < 3; ++c) q.ssim += ssim(pc[c], rc[c]) / 3.0;
  return q;
}

int cmd_eval(const EvalArgs& a) {
  if (a.crop_border < 0) throw UsageError("--crop-border must be >= 0");
  const FrameSequence pred = load_sequence(a.pred), gt = load_sequence(a.gt);
  if (pred.size() != gt.size())
    throw DimensionError("frame counts differ: " + std::to_string(pred.size()) + " predicted, " +
                         std::to_string(gt.size()) + " ground truth");
  if (pred.height() != gt.height() || pred.width() != gt.width())
    throw DimensionError("frame sizes differ: " + std::to_string(pred.height()) + "x" +
                         std::to_string(pred.width()) + " vs " + std::to_string(gt.height()) + "x" +
                         std::to_string(gt.width()));
  QualityScores mean_q;
  for (std::size_t i = 0; i < pred.size(); ++i) {
    const QualityScores q = a.y_channel ? y_quality(pred.frames[i], gt.frames[i], a.crop_border)
                                        : rgb_quality(pred.frames[i], gt.frames[i], a.crop_border);
    std::printf("frame %zu: PSNR %.4f dB  SSIM %.6f\n", i, q.psnr, q.ssim);
    mean_q.psnr += q.psnr;
    mean_q.ssim += q.ssim;
  }
  const double n = static_cast<double>(pred.size());
  std::printf("mean (%zu frames, %s, crop %d): PSNR %.4f dB  SSIM %.6f\n", pred.size(),
              a.y_channel ? "Y" : "RGB", a.crop_border, mean_q.psnr / n, mean_q.ssim / n);
  return 0;
}

// ---------------------------------------------------------------------------

struct TrainArgs {
  std::string out;
  std::optional<std::string> config, csv, config_out, ugru;
  std::optional<int> iters, channels, batch, frames;
  std::optional<std::uint64_t> seed;
};

int cmd_train(const TrainArgs& a) {
  CtunConfig cfg = desk_model_config();
  TrainConfig tc;
  load_config_file(a.config, cfg, tc);
  if (a.iters) tc.iters = *a.iters;
  if (a.channels) cfg.channels = *a.channels;
  if (a.batch) tc.batch = *a.batch;
  if (a.frames) tc.frames = *a.frames;
  if (a.seed) tc.seed = *a.seed;
  if (a.ugru) cfg.ugru_variant = parse_ugru_variant(*a.ugru);
  try {
    cfg.validate();
    tc.validate();
  } catch (const ValueError& e) {
    throw UsageError(e.what());
  }

  TrainOutputs outs;
  outs.weights = a.out;
  outs.csv = a.csv ? fs::path(*a.csv) : fs::path(a.out).replace_extension(".csv");
  const auto start = std::chrono::steady_clock::now();
  outs.on_log = [&](const TrainLogRow& r) {
    const double s = std::chrono::duration<double>(std::chrono::steady_clock::now() - start).count();
    std::printf("iter %5d  charbonnier %.5f  fft %.4f  total %.5f  lr %.3e  (%.0f s)\n", r.iteration,
                r.charbonnier, r.fft, r.total, r.lr, s);
    std::fflush(stdout);
  };
  std::printf("training C=%d blocks {%d,%d,%d} %s, %d iterations, batch %d, %d frames of %dx%d LR\n",
              cfg.channels, cfg.blocks.extractor, cfg.blocks.propagation, cfg.blocks.reconstruction,
              to_string(cfg.ugru_variant), tc.iters, tc.batch, tc.frames, tc.lr_size, tc.lr_size);
  const TrainResult r = train_loop(cfg, tc, outs);
  if (a.config_out) {
    std::ofstream os(*a.config_out);
    if (!os) throw IoError("cannot write " + *a.config_out);
    os << format_model_config(cfg);
  }
  const FitReport fit = evaluate_fit(cfg, r.params, make_training_data(cfg, tc));
  std::printf("training clips, Y channel: network %.3f dB / %.4f, bicubic %.3f dB / %.4f\n", fit.sr_psnr,
              fit.sr_ssim, fit.bicubic_psnr, fit.bicubic_ssim);
  std::printf("weights written to %s, loss log to %s\n", a.out.c_str(), outs.csv->string().c_str());
  return 0;
}

// ---------------------------------------------------------------------------

struct ProfileArgs {
  std::optional<std::string> config, json, weights;
  int frames = 4;
  std::string size = "64x64";
  std::uint64_t seed = 0;
};

int cmd_profile(const ProfileArgs& a) {
  if (a.frames < 2) throw UsageError("--frames must be >= 2");
  const auto [h, w] = parse_size(a.size);
  CtunConfig cfg;
  TrainConfig unused;
  load_config_file(a.config, cfg, unused);
  cfg.validate();
  const ParamStore params = a.weights ? load_weights(*a.weights) : init_params(cfg, a.seed);
  const ProfileReport r = profile_inference(cfg, params, a.frames, h, w, a.seed);
  std::fputs(r.to_text().c_str(), stdout);
  if (a.json) {
    std::ofstream os(*a.json);
    if (!os) throw IoError("cannot write " + *a.json);
    os << r.to_json() << "\n";
    std::printf("report written to %s\n", a.json->c_str());
  } else {
    std::printf("%s\n", r.to_json().c_str());
  }
  return 0;
}

// ---------------------------------------------------------------------------

int cmd_gradcheck(std::uint64_t seed) {
  int failed = 0;
  const auto start = std::chrono::steady_clock::now();
  run_gradcheck_suite(seed, [&](const SuiteCase& c) {
    const bool ok = c.passed();
    failed += ok ? 0 : 1;
    std::printf("%-4s %-20s max rel err %.3e (tol %.0e)  coords %zu", ok ? "ok" : "FAIL", c.name.c_str(),
                c.max_rel_error, c.tolerance, c.coords_checked);
    if (c.coords_skipped) std::printf(", %zu skipped at kinks", c.coords_skipped);
    std::printf("\n");
    std::fflush(stdout);
  });
  const double s = std::chrono::duration<double>(std::chrono::steady_clock::now() - start).count();
  std::printf("%s (%.1f s)\n", failed ? "gradient check FAILED" : "all gradient checks passed", s);
  return failed ? kExitRuntime : 0;
}

}  // namespace

int main(int argc, char** argv) {
  CLI::App app{"Recurrent video super-resolution toolkit"};
  app.require_subcommand(1);

  DegradeArgs dg;
  auto* degrade_cmd = app.add_subcommand("degrade", "Produce an LR sequence from HR frames");
  degrade_cmd->add_option("--in", dg.in, "HR frame directory")->required();
  degrade_cmd->add_option("--out", dg.out, "Output directory")->required();
  degrade_cmd->add_option("--mode", dg.mode, "bi or bd")->check(CLI::IsMember({"bi", "bd"}));
  degrade_cmd->add_option("--scale", dg.scale, "Downscaling factor");
  degrade_cmd->add_option("--sigma", dg.sigma, "Gaussian sigma for bd (default 1.6)");

  SrArgs sr;
  auto* sr_cmd = app.add_subcommand("sr", "Super-resolve an LR sequence");
  sr_cmd->add_option("--in", sr.in, "LR frame directory")->required();
  sr_cmd->add_option("--out", sr.out, "Output directory")->required();
  sr_cmd->add_option("--weights", sr.weights, "Weight file")->required();
  sr_cmd->add_option("--config", sr.config, "Model config file (default: inferred from weights)");
  sr_cmd->add_option("--ugru", sr.ugru, "Hidden-update variant")->check(CLI::IsMember({"split", "shared"}));

  EvalArgs ev;
  auto* eval_cmd = app.add_subcommand("eval", "PSNR/SSIM of predicted frames against ground truth");
  eval_cmd->add_option("--pred", ev.pred, "Predicted frame directory")->required();
  eval_cmd->add_option("--gt", ev.gt, "Ground-truth frame directory")->required();
  eval_cmd->add_flag("--y-channel", ev.y_channel, "Score the BT.601 luma channel");
  eval_cmd->add_option("--crop-border", ev.crop_border, "Pixels dropped from each edge");

  TrainArgs tr;
  auto* train_cmd = app.add_subcommand("train", "Train on synthetic sequences");
  train_cmd->add_option("--out", tr.out, "Output weight file")->required();
  train_cmd->add_option("--config", tr.config, "key=value model/training config");
  train_cmd->add_option("--iters", tr.iters, "Iterations");
  train_cmd->add_option("--channels", tr.channels, "Feature channels");
  train_cmd->add_option("--batch", tr.batch, "Batch size");
  train_cmd->add_option("--frames", tr.frames, "Frames per training sequence");
  train_cmd->add_option("--seed", tr.seed, "Seed");
  train_cmd->add_option("--ugru", tr.ugru, "Hidden-update variant")->check(CLI::IsMember({"split", "shared"}));
  train_cmd->add_option("--csv", tr.csv, "Loss log (default: weights path with .csv)");
  train_cmd->add_option("--config-out", tr.config_out, "Write the model config here");

  ProfileArgs pr;
  auto* profile_cmd = app.add_subcommand("profile", "Parameters, FLOPs, MACs, memory and time per frame");
  profile_cmd->add_option("--config", pr.config, "key=value model config");
  profile_cmd->add_option("--weights", pr.weights, "Weight file (default: seeded random init)");
  profile_cmd->add_option("--frames", pr.frames, "Sequence length");
  profile_cmd->add_option("--size", pr.size, "LR frame size HxW");
  profile_cmd->add_option("--json", pr.json, "Write the JSON report here");
  profile_cmd->add_option("--seed", pr.seed, "Seed");

  std::uint64_t gc_seed = 0;
  auto* gradcheck_cmd = app.add_subcommand("gradcheck", "Float64 finite-difference gradient suite");
  gradcheck_cmd->add_option("--seed", gc_seed, "Seed");

  try {
    app.parse(argc, argv);
  } catch (const CLI::CallForHelp& e) {
    return app.exit(e);
  } catch (const CLI::CallForAllHelp& e) {
    return app.exit(e);
  } catch (const CLI::ParseError& e) {
    app.exit(e);
    return kExitUsage;
  }

  try {
    if (*degrade_cmd) return cmd_degrade(dg);
    if (*sr_cmd) return cmd_sr(sr);
    if (*eval_cmd) return cmd_eval(ev);
    if (*train_cmd) return cmd_train(tr);
    if (*profile_cmd) return cmd_profile(pr);
    if (*gradcheck_cmd) return cmd_gradcheck(gc_seed);
  } catch (const UsageError& e) {
    std::cerr << "usage error: " << e.what() << "\n";
    return kExitUsage;
  } catch (const std::exception& e) {
    std::cerr << "error: " << e.what() << "\n";
    return kExitRuntime;
  }
  return kExitUsage;
}
