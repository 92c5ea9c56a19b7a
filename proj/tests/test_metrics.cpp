#include <gtest/gtest.h>

#include <algorithm>
#include <cmath>
#include <random>

#include "json.hpp"

#include "ctun/alloc_meter.hpp"
#include "ctun/error.hpp"
#include "ctun/metrics.hpp"
#include "ctun/ops.hpp"
#include "oracles.hpp"

using namespace ctun;

namespace {

constexpr DType f64 = DType::f64;

Tensor random_bytes(int h, int w, std::mt19937_64& rng) {
  std::uniform_int_distribution<int> byte(0, 255);
  std::vector<double> v(static_cast<std::size_t>(h) * w);
  for (double& x : v) x = byte(rng);
  return Tensor::from_values(Shape{1, 1, h, w}, v, f64);
}

CtunConfig small_config(int c, BlockCounts blocks, UgruVariant v = UgruVariant::split) {
  CtunConfig cfg;
  cfg.channels = c;
  cfg.blocks = blocks;
  cfg.ugru_variant = v;
  return cfg;
}

}  // namespace

TEST(Psnr, CapForIdenticalInputs) {
  std::mt19937_64 rng(1);
  const Tensor a = random_bytes(8, 8, rng);
  EXPECT_EQ(psnr(a, a), 99.0);
}

TEST(Psnr, UnitOffset) {
  std::mt19937_64 rng(2);
  const Tensor a = random_bytes(16, 16, rng);
  const double v = psnr(a, add_scalar(a, 1.0));
  EXPECT_NEAR(v, 48.1308, 1e-3);
  EXPECT_NEAR(v, 20.0 * std::log10(255.0), 1e-12);
}

TEST(Psnr, MatchesScalarOracleAndIsSymmetric) {
  std::mt19937_64 rng(3);
  for (int i = 0; i < 50; ++i) {
    const Tensor a = random_bytes(13 + i % 7, 17 + i % 5, rng), b = random_bytes(13 + i % 7, 17 + i % 5, rng);
    const double want = oracle::psnr(a.to_vector(), b.to_vector(), 255.0);
    EXPECT_NEAR(psnr(a, b), want, 1e-9);
    EXPECT_EQ(psnr(a, b), psnr(b, a));
  }
  EXPECT_THROW(psnr(Tensor::zeros(Shape{1, 1, 2, 2}), Tensor::zeros(Shape{1, 1, 2, 3})), DimensionError);
}

TEST(Ssim, IdenticalIsExactlyOne) {
  std::mt19937_64 rng(4);
  const Tensor a = random_bytes(20, 24, rng);
  EXPECT_EQ(ssim(a, a), 1.0);
}

TEST(Ssim, InvertedImageIsAnticorrelated) {
  std::mt19937_64 rng(5);
  const Tensor a = random_bytes(32, 32, rng);
  const Tensor b = add_scalar(scale(a, -1.0), 255.0);
  const double got = ssim(a, b);
  EXPECT_LT(got, 0.1);
  EXPECT_NEAR(got, oracle::ssim(a.to_vector(), b.to_vector(), 32, 32), 1e-6);
}

TEST(Ssim, MatchesDirectOracleOnRandomPairs) {
  std::mt19937_64 rng(6);
  for (int i = 0; i < 50; ++i) {
    const int h = 11 + i % 13, w = 11 + (i * 7) % 17;
    const Tensor a = random_bytes(h, w, rng);
    // Correlated pair so SSIM spans a useful range.
    Tensor b = a.clone();
    std::normal_distribution<double> noise(0.0, 5.0 + 3.0 * (i % 10));
    for (double& v : b.mutable_data<double>()) v = std::clamp(std::round(v + noise(rng)), 0.0, 255.0);
    const double want = oracle::ssim(a.to_vector(), b.to_vector(), h, w);
    EXPECT_NEAR(ssim(a, b), want, 1e-6) << h << "x" << w;
    EXPECT_NEAR(ssim(a, b), ssim(b, a), 1e-15);
  }
}

TEST(Ssim, Errors) {
  EXPECT_THROW(ssim(Tensor::zeros(Shape{1, 1, 10, 20}), Tensor::zeros(Shape{1, 1, 10, 20})), DimensionError);
  EXPECT_THROW(ssim(Tensor::zeros(Shape{1, 3, 20, 20}), Tensor::zeros(Shape{1, 3, 20, 20})), DimensionError);
}

TEST(Quality, YChannelAndBorderCrop) {
  std::mt19937_64 rng(7);
  const Tensor a = Tensor::uniform(Shape{1, 3, 24, 24}, rng, 0, 1, f64);
  const Tensor b = add_scalar(a, 1.0 / 219.0);  // shifts Y by 65.481+128.553+24.966 = 219 / 219
  const auto q = y_quality(b, a);
  EXPECT_NEAR(q.psnr, 48.1308, 1e-3);
  EXPECT_GT(q.ssim, 0.99);
  EXPECT_NEAR(y_quality(b, a, 4).psnr, 48.1308, 1e-3);
  EXPECT_THROW(y_quality(a, a, 12), ValueError);
}

TEST(TemporalProfile, ShapesAndContent) {
  std::mt19937_64 rng(8);
  FrameSequence seq;
  for (int i = 0; i < 4; ++i) seq.frames.push_back(Tensor::uniform(Shape{1, 3, 5, 7}, rng, 0, 1, f64));
  const Tensor p = temporal_profile(seq, 2);
  EXPECT_EQ(p.shape(), (Shape{1, 3, 4, 7}));
  for (int t = 0; t < 4; ++t)
    for (int c = 0; c < 3; ++c)
      for (int x = 0; x < 7; ++x) EXPECT_EQ(p.at(0, c, t, x), seq.frames[t].at(0, c, 2, x));

  FrameSequence one;
  one.frames = {seq.frames[1]};
  EXPECT_EQ(temporal_profile(one, 0).shape(), (Shape{1, 3, 1, 7}));

  FrameSequence still;
  still.frames = {seq.frames[0], seq.frames[0], seq.frames[0]};
  const Tensor s = temporal_profile(still, 4);
  for (int c = 0; c < 3; ++c)
    for (int x = 0; x < 7; ++x) {
      EXPECT_EQ(s.at(0, c, 0, x), s.at(0, c, 1, x));
      EXPECT_EQ(s.at(0, c, 0, x), s.at(0, c, 2, x));
    }
  EXPECT_THROW(temporal_profile(seq, 5), ValueError);
  EXPECT_THROW(temporal_profile(seq, -1), ValueError);
}

TEST(Flops, SingleConvCountsEighteen) {
  MacCounter::global().reset();
  const Tensor y = conv2d(Tensor::ones(Shape{1, 1, 1, 1}), Tensor::ones(Shape{1, 1, 3, 3}), Tensor(), 1, 1);
  EXPECT_EQ(2 * MacCounter::global().value(), 18u);
  // The same layer as a row of the analytic table.
  const auto rows = describe(small_config(1, {1, 1, 1}));
  const auto row = std::find_if(rows.begin(), rows.end(),
                               [](const LayerRow& r) { return r.name == "extract.block0.conv0"; });
  ASSERT_NE(row, rows.end());
  EXPECT_EQ(row->flops_per_pixel, 18u);
}

TEST(Flops, ConvTermsScaleLinearlyWithArea) {
  const CtunConfig cfg = small_config(8, {1, 2, 1});
  std::uint64_t fixed = 0;
  for (const auto& r : describe(cfg)) fixed += r.flops_fixed;
  const auto a = count_flops_detailed(cfg, 6, 5), b = count_flops_detailed(cfg, 12, 5);
  EXPECT_EQ(b.conv - fixed, 2 * (a.conv - fixed));
  EXPECT_EQ(b.other - (cfg.reduced_channels() + 4 * 8), 2 * (a.other - (cfg.reduced_channels() + 4 * 8)));
  EXPECT_EQ(count_flops(cfg, 6, 5), a.conv + a.other);
}

TEST(Flops, ConvCountEqualsTwiceMeasuredMacs) {
  const std::vector<CtunConfig> configs = {
      small_config(4, {1, 1, 1}),
      small_config(16, {1, 2, 1}, UgruVariant::shared),
      CtunConfig{},
  };
  for (const auto& cfg : configs) {
    const ParamStore p = init_params(cfg, 1);
    for (auto [h, w] : {std::pair{6, 5}, std::pair{8, 8}}) {
      const std::uint64_t measured = measure_frame_macs(cfg, p, 3, h, w);
      EXPECT_EQ(count_flops_detailed(cfg, h, w).conv, 2 * measured) << cfg.channels << " " << h << "x" << w;
    }
  }
}

TEST(Profile, ReportFields) {
  const CtunConfig cfg = small_config(8, {1, 1, 1});
  const ParamStore p = init_params(cfg, 2);
  const ProfileReport r = profile_inference(cfg, p, 3, 8, 8);
  EXPECT_EQ(r.params, param_count(cfg));
  EXPECT_GT(r.wall_ms_per_frame, 0.0);
  EXPECT_EQ(r.flops_conv, 2 * r.macs_measured);
  EXPECT_EQ(r.flops_analytic, count_flops(cfg, 8, 8));
  // The largest single tensor is the 32x32 RGB output or a 4C x 16 x 16 upsampler map.
  const std::size_t largest = std::max<std::size_t>(3 * 32 * 32, 32 * 16 * 16) * sizeof(float);
  EXPECT_GE(r.peak_bytes, largest);
  const auto j = nlohmann::json::parse(r.to_json());
  for (const char* key : {"params", "flops_analytic", "macs_measured", "peak_bytes", "wall_ms_per_frame"})
    EXPECT_TRUE(j.contains(key)) << key;
  EXPECT_EQ(j["params"].get<std::size_t>(), r.params);
  EXPECT_NE(r.to_text().find("peak_bytes"), std::string::npos);
}

TEST(Profile, PeakMemoryIndependentOfSequenceLength) {
  const CtunConfig cfg = small_config(16, {1, 2, 1});
  const ParamStore p = init_params(cfg, 3);
  const double p4 = static_cast<double>(profile_inference(cfg, p, 4, 16, 16).peak_bytes);
  for (int n : {8, 16, 32}) {
    const double pn = static_cast<double>(profile_inference(cfg, p, n, 16, 16).peak_bytes);
    EXPECT_LE(std::abs(pn - p4) / p4, 0.05) << n;
  }
}
