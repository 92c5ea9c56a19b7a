#include <gtest/gtest.h>

#include <cmath>
#include <map>
#include <random>
#include <set>

#include "ctun/alloc_meter.hpp"
#include "ctun/autograd.hpp"
#include "ctun/error.hpp"
#include "ctun/grad_check.hpp"
#include "ctun/model.hpp"
#include "ctun/ops.hpp"
#include "oracles.hpp"

using namespace ctun;

namespace {

constexpr DType f64 = DType::f64;

CtunConfig tiny_config(int c = 4) {
  CtunConfig cfg;
  cfg.channels = c;
  cfg.blocks = {1, 1, 1};
  return cfg;
}

Tensor rand_t(const Shape& s, std::mt19937_64& rng, double lo = -1.0, double hi = 1.0) {
  return Tensor::uniform(s, rng, lo, hi, f64);
}

// Fills every tensor whose name starts with `prefix` with random values.
void randomize(ParamStore& p, const std::string& prefix, std::mt19937_64& rng, double amp = 0.3) {
  for (auto& [name, t] : p.entries())
    if (name.rfind(prefix, 0) == 0) {
      Tensor tt = t;
      for (double& v : tt.mutable_data<double>()) v = std::uniform_real_distribution<>(-amp, amp)(rng);
    }
}

oracle::Image oracle_conv(const Tensor& x, const ParamStore& p, const std::string& name) {
  const Tensor& w = p.get(name + ".weight");
  return oracle::conv2d(oracle::from_tensor(x), oracle::from_tensor(w),
                        p.get(name + ".bias").to_vector(), 1, w.shape().h / 2);
}

FrameSequence random_sequence(int n, int h, int w, std::mt19937_64& rng, DType dt = f64) {
  FrameSequence seq;
  for (int i = 0; i < n; ++i) seq.frames.push_back(Tensor::uniform(Shape{1, 3, h, w}, rng, 0, 1, dt));
  return seq;
}

}  // namespace

// ---------------------------------------------------------------------------
// Config, parameters, layer table

TEST(Config, Validation) {
  CtunConfig cfg;
  EXPECT_NO_THROW(cfg.validate());
  cfg.scale = 3;
  EXPECT_THROW(cfg.validate(), ValueError);
  cfg = CtunConfig{};
  cfg.channels = 0;
  EXPECT_THROW(cfg.validate(), ValueError);
  cfg = CtunConfig{};
  cfg.blocks.propagation = 0;
  EXPECT_THROW(cfg.validate(), ValueError);
  EXPECT_EQ(parse_ugru_variant("shared"), UgruVariant::shared);
  EXPECT_THROW(parse_ugru_variant("both"), ValueError);
}

TEST(ParamCount, SingleConvClosedForm) {
  const auto rows = describe(tiny_config(4));
  ASSERT_EQ(rows.front().name, "extract.conv_in");
  EXPECT_EQ(rows.front().params, 3u * 4 * 9 + 4);
  EXPECT_EQ(rows.front().params, 112u);
}

TEST(ParamCount, MatchesStoreForSmallConfigs) {
  for (auto variant : {UgruVariant::split, UgruVariant::shared}) {
    for (int scale : {2, 4}) {
      CtunConfig cfg;
      cfg.channels = 8;
      cfg.blocks = {1, 1, 1};
      cfg.ugru_variant = variant;
      cfg.scale = scale;
      const ParamStore p = init_params(cfg, 1);
      EXPECT_EQ(param_count(cfg), p.total_elements());
      std::set<std::string> names;
      for (const auto& [name, t] : p.entries()) EXPECT_TRUE(names.insert(name).second) << name;
    }
  }
}

TEST(ParamCount, DefaultConfigHandAudit) {
  const CtunConfig cfg;
  const auto rows = describe(cfg);
  std::size_t total = 0;
  std::map<std::string, std::size_t> by_name;
  for (const auto& r : rows) {
    total += r.params;
    by_name[r.name] = r.params;
  }
  EXPECT_EQ(total, param_count(cfg));
  EXPECT_EQ(total, init_params(cfg, 0).total_elements());
  // 3x3 convs: k*k*cin*cout + cout.
  EXPECT_EQ(by_name.at("extract.conv_in"), 9u * 3 * 64 + 64);        // 1792
  EXPECT_EQ(by_name.at("prop.conv_in"), 9u * 192 * 64 + 64);         // 110656
  EXPECT_EQ(by_name.at("recon.up0"), 9u * 64 * 256 + 256);           // 147712
  EXPECT_EQ(by_name.at("recon.conv_out"), 9u * 64 * 3 + 3);          // 1731
  EXPECT_EQ(by_name.at("hu.encoder.ca_reduce"), 64u * 16 + 16);      // 1040
  EXPECT_EQ(by_name.at("icam.seb0.gate"), 49u * 2 + 1);              // 99
  EXPECT_EQ(by_name.at("icam.ln0"), 128u);
  EXPECT_NE(describe_text(cfg).find("recon.conv_out"), std::string::npos);
}

TEST(Params, InitIsDeterministicAndStructured) {
  const CtunConfig cfg = tiny_config(8);
  const ParamStore a = init_params(cfg, 7), b = init_params(cfg, 7), c = init_params(cfg, 8);
  ASSERT_EQ(a.size(), b.size());
  bool any_diff = false;
  for (std::size_t i = 0; i < a.size(); ++i) {
    EXPECT_EQ(a.entries()[i].first, b.entries()[i].first);
    EXPECT_EQ(max_abs_diff(a.entries()[i].second, b.entries()[i].second), 0.0);
    if (max_abs_diff(a.entries()[i].second, c.entries()[i].second) > 0) any_diff = true;
  }
  EXPECT_TRUE(any_diff);
  for (double v : a.get("prop.conv_in.bias").to_vector()) EXPECT_EQ(v, 0.0);
  for (double v : a.get("icam.ln1.gamma").to_vector()) EXPECT_EQ(v, 1.0);
  for (double v : a.get("icam.ln1.beta").to_vector()) EXPECT_EQ(v, 0.0);
  const double bound = 1.0 / std::sqrt(8.0 * 9);
  for (double v : a.get("extract.block0.conv0.weight").to_vector()) EXPECT_LE(std::abs(v), bound);
}

TEST(Params, SharedNamesMatchAcrossVariants) {
  CtunConfig split = tiny_config(8), shared = tiny_config(8);
  shared.ugru_variant = UgruVariant::shared;
  const ParamStore a = init_params(split, 3), b = init_params(shared, 3);
  EXPECT_TRUE(a.contains("hu.ugru.expand.weight"));
  EXPECT_FALSE(b.contains("hu.ugru.expand.weight"));
  for (const auto& [name, t] : b.entries()) EXPECT_EQ(max_abs_diff(t, a.get(name)), 0.0) << name;
}

TEST(Params, StoreErrors) {
  ParamStore p;
  p.add("a", Tensor::zeros(Shape{1, 1, 1, 1}));
  EXPECT_THROW(p.add("a", Tensor::zeros(Shape{1, 1, 1, 1})), ValueError);
  EXPECT_THROW(p.get("b"), ValueError);
  EXPECT_THROW(check_params(tiny_config(), p), ValueError);
  ParamStore q = zero_params(tiny_config());
  EXPECT_NO_THROW(check_params(tiny_config(), q));
  EXPECT_THROW(check_params(tiny_config(8), q), DimensionError);
}

// ---------------------------------------------------------------------------
// Blocks

TEST(Extract, ZeroWeightsGiveZeroFeatures) {
  const CtunConfig cfg = tiny_config(6);
  std::mt19937_64 rng(1);
  const Tensor f = extract_features(rand_t(Shape{1, 3, 5, 7}, rng), zero_params(cfg, f64), cfg);
  EXPECT_EQ(f.shape(), (Shape{1, 6, 5, 7}));
  for (double v : f.to_vector()) EXPECT_EQ(v, 0.0);
}

TEST(Extract, RejectsWrongChannelCount) {
  const CtunConfig cfg = tiny_config();
  EXPECT_THROW(extract_features(Tensor::zeros(Shape{1, 4, 5, 5}, f64), zero_params(cfg, f64), cfg),
               DimensionError);
}

TEST(Extract, GradientCheck) {
  const CtunConfig cfg = tiny_config(3);
  ParamStore p = init_params(cfg, 5, f64);
  std::mt19937_64 rng(2);
  const Tensor x = rand_t(Shape{1, 3, 5, 5}, rng);
  std::vector<Tensor> params;
  for (const auto& [name, t] : p.entries())
    if (name.rfind("extract.", 0) == 0) params.push_back(t);
  GradCheckOptions opts;
  opts.eps = 1e-4;
  opts.five_point = true;
  const auto r = grad_check([&] { return sum(extract_features(x, p, cfg)); }, params, opts);
  EXPECT_LT(r.max_rel_error, 1e-5);
}

TEST(ResidualBlock, ZeroWeightsAreIdentity) {
  const ParamStore p = zero_params(tiny_config(), f64);
  std::mt19937_64 rng(3);
  const Tensor x = rand_t(Shape{1, 4, 6, 6}, rng);
  EXPECT_EQ(max_abs_diff(residual_block(x, p, "prop.block0"), x), 0.0);
}

TEST(ResidualBlock, MatchesOracleComposition) {
  ParamStore p = zero_params(tiny_config(), f64);
  std::mt19937_64 rng(4);
  randomize(p, "prop.block0", rng);
  const Tensor x = rand_t(Shape{2, 4, 5, 6}, rng);
  oracle::Image mid = oracle_conv(x, p, "prop.block0.conv0");
  for (double& v : mid.v) v = std::max(v, 0.0);
  const oracle::Image y = oracle_conv(oracle::to_tensor(mid), p, "prop.block0.conv1");
  const auto got = residual_block(x, p, "prop.block0").to_vector();
  const auto xin = x.to_vector();
  for (std::size_t i = 0; i < got.size(); ++i) EXPECT_NEAR(got[i], xin[i] + y.v[i], 1e-12);
}

TEST(Seb, ZeroWeightsAreIdentity) {
  const ParamStore p = zero_params(tiny_config(), f64);
  std::mt19937_64 rng(5);
  const Tensor x = rand_t(Shape{1, 4, 6, 5}, rng);
  const Tensor y = seb_forward(x, p, "icam.seb1");
  EXPECT_EQ(y.shape(), x.shape());
  EXPECT_EQ(max_abs_diff(y, x), 0.0);
}

TEST(Seb, GateWithinUnitInterval) {
  ParamStore p = zero_params(tiny_config(), f64);
  std::mt19937_64 rng(6);
  randomize(p, "icam.seb0.gate", rng, 1.0);
  const Tensor y = rand_t(Shape{1, 4, 6, 6}, rng, -3, 3);
  const Tensor g = sigmoid(conv2d(concat_channels({channel_mean(y), channel_max(y)}),
                                  p.get("icam.seb0.gate.weight"), p.get("icam.seb0.gate.bias"), 1, 3));
  for (double v : g.to_vector()) {
    EXPECT_GT(v, 0.0);
    EXPECT_LT(v, 1.0);
  }
  // spatial_gate multiplies by exactly that map.
  const auto gated = spatial_gate(y, p, "icam.seb0.gate").to_vector();
  const auto yv = y.to_vector(), gv = g.to_vector();
  for (std::size_t i = 0; i < yv.size(); ++i) EXPECT_NEAR(gated[i], yv[i] * gv[i % 36], 1e-14);
}

TEST(Icam, ZeroSebGivesCumulativeNormalizedSums) {
  std::mt19937_64 rng(7);
  const Shape s{1, 4, 5, 5};
  const Tensor a = rand_t(s, rng), b = rand_t(s, rng), c = rand_t(s, rng);
  ParamStore mixed = zero_params(tiny_config(), f64);
  for (int j = 0; j < 3; ++j) {
    const std::string ln = "icam.ln" + std::to_string(j);
    for (double& v : mixed.get(ln + ".gamma").mutable_data<double>()) v = 1.0;
  }
  const auto out = icam_cascade(a, b, c, mixed);
  const Tensor one = Tensor::ones(Shape{1, 4, 1, 1}, f64), zero = Tensor::zeros(Shape{1, 4, 1, 1}, f64);
  const Tensor la = layer_norm(a, one, zero), lb = layer_norm(b, one, zero), lc = layer_norm(c, one, zero);
  EXPECT_LT(max_abs_diff(out.prev, la), 1e-14);
  EXPECT_LT(max_abs_diff(out.cur, add(lb, la)), 1e-14);
  EXPECT_LT(max_abs_diff(out.next, add(lc, add(lb, la))), 1e-14);
}

TEST(Icam, ConstantInputsNormalizeToZero) {
  ParamStore p = init_params(tiny_config(), 0, f64);
  for (auto& [name, t] : p.entries())
    if (name.rfind("icam.seb", 0) == 0) {
      Tensor tt = t;
      for (double& v : tt.mutable_data<double>()) v = 0.0;
    }
  const Shape s{1, 4, 4, 4};
  const auto out = icam_cascade(Tensor::full(s, 2.0, f64), Tensor::full(s, -1.0, f64),
                                Tensor::full(s, 0.5, f64), p);
  for (const Tensor* t : {&out.prev, &out.cur, &out.next})
    for (double v : t->to_vector()) EXPECT_EQ(v, 0.0);
}

TEST(Icam, MatchesStraightLineTranscription) {
  ParamStore p = init_params(tiny_config(), 11, f64);
  std::mt19937_64 rng(8);
  randomize(p, "icam.", rng, 0.4);
  const Shape s{1, 4, 6, 6};
  const Tensor a = rand_t(s, rng), b = rand_t(s, rng), c = rand_t(s, rng);
  auto ln = [&](const Tensor& x, int j) {
    const std::string n = "icam.ln" + std::to_string(j);
    return layer_norm(x, p.get(n + ".gamma"), p.get(n + ".beta"));
  };
  const Tensor ap = seb_forward(ln(a, 0), p, "icam.seb0");
  const Tensor ac = seb_forward(add(ln(b, 1), ap), p, "icam.seb1");
  const Tensor an = seb_forward(add(ln(c, 2), ac), p, "icam.seb2");
  const auto out = icam_cascade(a, b, c, p);
  EXPECT_EQ(max_abs_diff(out.prev, ap), 0.0);
  EXPECT_EQ(max_abs_diff(out.cur, ac), 0.0);
  EXPECT_EQ(max_abs_diff(out.next, an), 0.0);
  EXPECT_THROW(icam_cascade(a, b, Tensor::zeros(Shape{1, 4, 6, 5}, f64), p), DimensionError);
}

TEST(GateFuse, Identities) {
  std::mt19937_64 rng(9);
  const Shape s{1, 3, 4, 4};
  const Tensor cur = rand_t(s, rng), z = Tensor::zeros(s, f64);
  EXPECT_EQ(max_abs_diff(gate_fuse(z, cur, z), cur), 0.0);
  const Tensor a = rand_t(s, rng);
  EXPECT_LT(max_abs_diff(gate_fuse(a, cur, a), scale(mul(sigmoid(a), cur), 2.0)), 1e-15);
}

TEST(GateFuse, MatchesScalarLoop) {
  std::mt19937_64 rng(10);
  const Shape s{2, 3, 4, 5};
  const Tensor a = rand_t(s, rng, -4, 4), b = rand_t(s, rng), c = rand_t(s, rng, -4, 4);
  const auto got = gate_fuse(a, b, c).to_vector();
  const auto av = a.to_vector(), bv = b.to_vector(), cv = c.to_vector();
  for (std::size_t i = 0; i < got.size(); ++i) {
    const double want = bv[i] / (1 + std::exp(-av[i])) + bv[i] / (1 + std::exp(-cv[i]));
    EXPECT_NEAR(got[i], want, 1e-14);
  }
}

TEST(Propagate, ZeroWeightsAndShape) {
  const CtunConfig cfg = tiny_config();
  const ParamStore p = zero_params(cfg, f64);
  std::mt19937_64 rng(11);
  const Shape s{1, 4, 5, 6};
  const Tensor h = propagate_forward(rand_t(s, rng), rand_t(s, rng), rand_t(s, rng), p, cfg);
  EXPECT_EQ(h.shape(), s);
  for (double v : h.to_vector()) EXPECT_EQ(v, 0.0);
}

TEST(Propagate, NonZeroStateAtFirstStepIsRejected) {
  const CtunConfig cfg = tiny_config();
  const ParamStore p = init_params(cfg, 1, f64);
  std::mt19937_64 rng(12);
  const Shape s{1, 4, 4, 4};
  const Tensor f = rand_t(s, rng), fa = rand_t(s, rng);
  EXPECT_NO_THROW(propagate_timestep(0, f, fa, Tensor::zeros(s, f64), p, cfg));
  EXPECT_THROW(propagate_timestep(0, f, fa, rand_t(s, rng), p, cfg), ValueError);
  EXPECT_NO_THROW(propagate_timestep(1, f, fa, rand_t(s, rng), p, cfg));
}

TEST(EncodeHidden, ZeroWeightsGiveZero) {
  const ParamStore p = zero_params(tiny_config(), f64);
  std::mt19937_64 rng(13);
  const Shape s{1, 4, 5, 5};
  const Tensor m = encode_hidden(rand_t(s, rng), rand_t(s, rng), rand_t(s, rng), p);
  EXPECT_EQ(m.shape(), s);
  for (double v : m.to_vector()) EXPECT_EQ(v, 0.0);
}

TEST(EncodeHidden, AttentionScalesInUnitInterval) {
  ParamStore p = init_params(tiny_config(8), 2, f64);
  std::mt19937_64 rng(14);
  randomize(p, "hu.encoder.ca", rng, 2.0);
  const Tensor scales = channel_attention_scales(rand_t(Shape{2, 8, 6, 6}, rng, -5, 5), p);
  EXPECT_EQ(scales.shape(), (Shape{2, 8, 1, 1}));
  for (double v : scales.to_vector()) {
    EXPECT_GT(v, 0.0);
    EXPECT_LT(v, 1.0);
  }
}

TEST(EncodeHidden, MatchesComposition) {
  ParamStore p = init_params(tiny_config(), 3, f64);
  std::mt19937_64 rng(15);
  randomize(p, "hu.", rng);
  const Shape s{1, 4, 6, 6};
  const Tensor fn = rand_t(s, rng), h = rand_t(s, rng), fa = rand_t(s, rng);
  // 1x1 fuse via the nested-loop oracle.
  const oracle::Image fused = oracle_conv(concat_channels({fn, h, fa}), p, "hu.fuse");
  const Tensor m = oracle::to_tensor(fused);
  // Channel attention written out per channel.
  std::vector<double> pooled(4, 0.0);
  for (int c = 0; c < 4; ++c) {
    for (int y = 0; y < 6; ++y)
      for (int x = 0; x < 6; ++x) pooled[c] += fused.at(0, c, y, x);
    pooled[c] /= 36.0;
  }
  const auto wr = p.get("hu.encoder.ca_reduce.weight").to_vector();
  const auto br = p.get("hu.encoder.ca_reduce.bias").to_vector();
  const auto we = p.get("hu.encoder.ca_expand.weight").to_vector();
  const auto be = p.get("hu.encoder.ca_expand.bias").to_vector();
  const double hidden = std::max(0.0, br[0] + wr[0] * pooled[0] + wr[1] * pooled[1] +
                                          wr[2] * pooled[2] + wr[3] * pooled[3]);
  oracle::Image ca = fused;
  for (int c = 0; c < 4; ++c) {
    const double sc = 1.0 / (1.0 + std::exp(-(be[c] + we[c] * hidden)));
    for (int y = 0; y < 6; ++y)
      for (int x = 0; x < 6; ++x) ca.at(0, c, y, x) *= sc;
  }
  const Tensor want = add(m, spatial_gate(oracle::to_tensor(ca), p, "hu.encoder.gate"));
  EXPECT_LT(max_abs_diff(encode_hidden(fn, h, fa, p), want), 1e-12);
}

TEST(GruCombine, BoundaryIdentitiesAreExact) {
  std::mt19937_64 rng(16);
  const Shape s{1, 4, 5, 5};
  const Tensor z = rand_t(s, rng, 0, 1), w = rand_t(s, rng, 0, 1), q = rand_t(s, rng), h = rand_t(s, rng, -3, 3);
  const Tensor ones = Tensor::ones(s, f64), zeros = Tensor::zeros(s, f64);
  EXPECT_EQ(max_abs_diff(gru_combine(z, ones, q, h), q), 0.0);
  EXPECT_EQ(max_abs_diff(gru_combine(z, zeros, q, h), mul(z, h)), 0.0);
  EXPECT_EQ(max_abs_diff(gru_combine(ones, zeros, q, h), h), 0.0);
  const auto got = gru_combine(z, w, q, h).to_vector();
  const auto zv = z.to_vector(), wv = w.to_vector(), qv = q.to_vector(), hv = h.to_vector();
  for (std::size_t i = 0; i < got.size(); ++i)
    EXPECT_NEAR(got[i], zv[i] * hv[i] * (1 - wv[i]) + qv[i] * wv[i], 1e-15);
}

TEST(Ugru, ZeroWeightsQuarterHidden) {
  std::mt19937_64 rng(17);
  const Shape s{1, 4, 5, 5};
  const Tensor m = rand_t(s, rng), h = rand_t(s, rng);
  for (auto v : {UgruVariant::split, UgruVariant::shared}) {
    CtunConfig cfg = tiny_config();
    cfg.ugru_variant = v;
    const Tensor out = ugru_update(m, h, zero_params(cfg, f64), v);
    EXPECT_EQ(out.shape(), s);
    EXPECT_EQ(max_abs_diff(out, scale(h, 0.25)), 0.0);
  }
}

TEST(Ugru, VariantsDifferOnSharedWeights) {
  CtunConfig split = tiny_config(), shared = tiny_config();
  shared.ugru_variant = UgruVariant::shared;
  const ParamStore ps = init_params(split, 9, f64), pq = init_params(shared, 9, f64);
  std::mt19937_64 rng(18);
  const Shape s{1, 4, 6, 6};
  const Tensor m = rand_t(s, rng), h = rand_t(s, rng);
  EXPECT_GT(max_abs_diff(ugru_update(m, h, ps, UgruVariant::split),
                         ugru_update(m, h, pq, UgruVariant::shared)),
            1e-6);
  EXPECT_THROW(ugru_update(m, h, ps, static_cast<UgruVariant>(7)), ValueError);
}

TEST(Reconstruct, ZeroWeightsGiveBilinear) {
  for (int scale_factor : {2, 4}) {
    CtunConfig cfg = tiny_config();
    cfg.scale = scale_factor;
    const ParamStore p = zero_params(cfg, f64);
    std::mt19937_64 rng(19);
    const Shape s{1, 4, 5, 7};
    const Tensor x = rand_t(Shape{1, 3, 5, 7}, rng, 0, 1);
    const Tensor y = reconstruct(rand_t(s, rng), rand_t(s, rng), rand_t(s, rng), x, p, cfg);
    EXPECT_EQ(y.shape(), (Shape{1, 3, 5 * scale_factor, 7 * scale_factor}));
    EXPECT_EQ(max_abs_diff(y, bilinear_resize(x, scale_factor)), 0.0);
  }
}

TEST(Reconstruct, CharbonnierGradientCheck) {
  const CtunConfig cfg = tiny_config(3);
  ParamStore p = init_params(cfg, 4, f64);
  std::mt19937_64 rng(20);
  const Shape s{1, 3, 4, 4};
  const Tensor f = rand_t(s, rng), fa = rand_t(s, rng), h = rand_t(s, rng);
  const Tensor x = rand_t(Shape{1, 3, 4, 4}, rng, 0, 1), target = rand_t(Shape{1, 3, 16, 16}, rng, 0, 1);
  std::vector<Tensor> params;
  for (const auto& [name, t] : p.entries())
    if (name.rfind("recon.", 0) == 0) params.push_back(t);
  auto loss = [&] {
    const Tensor d = sub(reconstruct(f, fa, h, x, p, cfg), target);
    return mean(sqrt_(add_scalar(mul(d, d), 1e-6)));
  };
  GradCheckOptions opts;
  opts.eps = 1e-4;
  opts.five_point = true;
  EXPECT_LT(grad_check(loss, params, opts).max_rel_error, 1e-5);
}

// ---------------------------------------------------------------------------
// Sequence driver

TEST(Sequence, SingleFrameUsesItsOwnFeaturesEverywhere) {
  const CtunConfig cfg = tiny_config();
  const ParamStore p = init_params(cfg, 1, f64);
  std::mt19937_64 rng(21);
  const FrameSequence seq = random_sequence(1, 6, 5, rng);
  const FrameSequence out = super_resolve_sequence(seq, p, cfg);
  ASSERT_EQ(out.size(), 1u);
  EXPECT_EQ(out.frames[0].shape(), (Shape{1, 3, 24, 20}));
  const Tensor& x = seq.frames[0];
  const Tensor f = extract_features(x, p, cfg);
  const Tensor fa = align(f, f, f, p);
  const Tensor h = propagate_forward(f, fa, Tensor::zeros(f.shape(), f64), p, cfg);
  EXPECT_EQ(max_abs_diff(out.frames[0], reconstruct(f, fa, h, x, p, cfg)), 0.0);
}

TEST(Sequence, MatchesStepByStepSchedule) {
  const CtunConfig cfg = tiny_config();
  const ParamStore p = init_params(cfg, 2, f64);
  std::mt19937_64 rng(22);
  const FrameSequence seq = random_sequence(4, 5, 6, rng);
  const FrameSequence out = super_resolve_sequence(seq, p, cfg);
  std::vector<Tensor> f;
  for (const auto& x : seq.frames) f.push_back(extract_features(x, p, cfg));
  Tensor state = Tensor::zeros(f[0].shape(), f64);
  for (int t = 0; t < 4; ++t) {
    const Tensor& fp = f[std::max(t - 1, 0)];
    const Tensor& fn = f[std::min(t + 1, 3)];
    const Tensor fa = align(fp, f[t], fn, p);
    const Tensor h = propagate_forward(f[t], fa, state, p, cfg);
    if (t < 3) state = ugru_update(encode_hidden(fn, h, fa, p), h, p, cfg.ugru_variant);
    EXPECT_EQ(max_abs_diff(out.frames[t], reconstruct(f[t], fa, h, seq.frames[t], p, cfg)), 0.0) << t;
  }
}

TEST(Sequence, ZeroWeightsGiveBilinearForEveryFrame) {
  const CtunConfig cfg = tiny_config(8);
  for (DType dt : {DType::f32, DType::f64}) {
    const ParamStore p = zero_params(cfg, dt);
    std::mt19937_64 rng(23);
    const FrameSequence seq = random_sequence(5, 7, 6, rng, dt);
    const FrameSequence out = super_resolve_sequence(seq, p, cfg);
    for (std::size_t i = 0; i < seq.size(); ++i)
      EXPECT_EQ(max_abs_diff(out.frames[i], bilinear_resize(seq.frames[i], 4)), 0.0);
  }
}

TEST(Sequence, HiddenUpdateNeverReadsPastTheEnd) {
  const CtunConfig cfg = tiny_config();
  const ParamStore p = init_params(cfg, 3);
  for (int n : {1, 2, 3, 6}) {
    std::mt19937_64 rng(24);
    const FrameSequence seq = random_sequence(n, 4, 4, rng, DType::f32);
    std::vector<StageEvent> events;
    std::vector<int> requested;
    run_sequence(
        n,
        [&](int i) {
          requested.push_back(i);
          return seq.frames[i];
        },
        [](int, Tensor) {}, p, cfg, [&](const StageEvent& e) { events.push_back(e); });
    int hu = 0;
    for (const auto& e : events) {
      EXPECT_GE(e.frame, 0);
      EXPECT_LT(e.frame, n);
      if (e.stage == Stage::hidden_update) {
        ++hu;
        EXPECT_LT(e.t, n - 1);
        EXPECT_EQ(e.frame, e.t + 1);
      }
    }
    EXPECT_EQ(hu, n - 1);
    // Each frame is pulled and extracted exactly once.
    EXPECT_EQ(requested.size(), static_cast<std::size_t>(n));
    for (int i = 0; i < n; ++i) EXPECT_EQ(requested[i], i);
  }
}

TEST(Sequence, PeakMemoryIndependentOfLength) {
  const CtunConfig cfg = tiny_config(8);
  const ParamStore p = init_params(cfg, 4);
  auto peak_for = [&](int n) {
    auto& meter = AllocationMeter::global();
    meter.reset_peak();
    const std::size_t base = meter.live_bytes();
    run_sequence(
        n,
        [](int i) {
          std::mt19937_64 rng(100 + i);
          return Tensor::uniform(Shape{1, 3, 16, 16}, rng, 0, 1);
        },
        [](int, Tensor) {}, p, cfg);
    return meter.peak_bytes() - base;
  };
  NoGradGuard guard;
  const double p4 = static_cast<double>(peak_for(4));
  for (int n : {8, 16, 32}) EXPECT_LE(std::abs(peak_for(n) - p4) / p4, 0.05) << n;
}

TEST(Sequence, Errors) {
  const CtunConfig cfg = tiny_config();
  const ParamStore p = zero_params(cfg);
  EXPECT_THROW(super_resolve_sequence(FrameSequence{}, p, cfg), ValueError);
  FrameSequence mixed;
  mixed.frames = {Tensor::zeros(Shape{1, 3, 4, 4}), Tensor::zeros(Shape{1, 3, 4, 5})};
  EXPECT_THROW(super_resolve_sequence(mixed, p, cfg), DimensionError);
  EXPECT_THROW(super_resolve_sequence(mixed, p, tiny_config(8)), Error);
}

TEST(Sequence, EndToEndGradientCheckBothVariants) {
  for (auto variant : {UgruVariant::split, UgruVariant::shared}) {
    CtunConfig cfg = tiny_config(4);
    cfg.ugru_variant = variant;
    ParamStore p = init_params(cfg, 5, f64);
    std::mt19937_64 rng(25);
    const FrameSequence seq = random_sequence(3, 8, 8, rng);
    std::vector<Tensor> targets;
    for (int i = 0; i < 3; ++i) targets.push_back(Tensor::uniform(Shape{1, 3, 32, 32}, rng, 0, 1, f64));
    auto loss = [&] {
      Tensor total;
      run_sequence(
          3, [&](int i) { return seq.frames[i]; },
          [&](int i, Tensor y) {
            const Tensor d = sub(y, targets[i]);
            const Tensor l = mean(sqrt_(add_scalar(mul(d, d), 1e-6)));
            total = total.defined() ? add(total, l) : l;
          },
          p, cfg);
      return total;
    };
    GradCheckOptions opts;
    opts.eps = 1e-4;
    opts.five_point = true;
    opts.skip_nonsmooth = true;
    opts.abs_floor = 1e-6;
    opts.max_coords_per_param = 24;
    const auto r = grad_check(loss, p.tensors(), opts);
    EXPECT_LT(r.max_rel_error, 1e-4) << to_string(variant) << " param " << r.worst_param;
    EXPECT_LT(r.coords_skipped * 10, r.coords_checked + r.coords_skipped);
  }
}
