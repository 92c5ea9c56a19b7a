#include "ctun/model.hpp"

#include <algorithm>
#include <array>
#include <cmath>
#include <iomanip>
#include <map>
#include <random>
#include <sstream>

#include "ctun/alloc_meter.hpp"
#include "ctun/autograd.hpp"
#include "ctun/error.hpp"
#include "ctun/ops.hpp"

namespace ctun {

const char* to_string(UgruVariant v) {
  switch (v) {
    case UgruVariant::split: return "split";
    case UgruVariant::shared: return "shared";
  }
  throw ValueError("unknown ugru variant");
}

UgruVariant parse_ugru_variant(std::string_view s) {
  if (s == "split") return UgruVariant::split;
  if (s == "shared") return UgruVariant::shared;
  throw ValueError("unknown ugru variant '" + std::string(s) + "' (expected split or shared)");
}

void CtunConfig::validate() const {
  if (channels < 1) throw ValueError("channels must be >= 1");
  if (scale != 2 && scale != 4) throw ValueError("scale must be 2 or 4");
  if (blocks.extractor < 1 || blocks.propagation < 1 || blocks.reconstruction < 1)
    throw ValueError("block counts must be >= 1");
  if (ugru_variant != UgruVariant::split && ugru_variant != UgruVariant::shared)
    throw ValueError("unknown ugru variant");
}

// ---------------------------------------------------------------------------
// ParamStore

void ParamStore::add(std::string name, Tensor t) {
  if (!t.defined()) throw ValueError("parameter '" + name + "' is undefined");
  if (index_.count(name)) throw ValueError("duplicate parameter '" + name + "'");
  index_.emplace(name, entries_.size());
  entries_.emplace_back(std::move(name), std::move(t));
}

bool ParamStore::contains(std::string_view name) const {
  return index_.count(std::string(name)) != 0;
}

const Tensor& ParamStore::get(std::string_view name) const {
  auto it = index_.find(std::string(name));
  if (it == index_.end()) throw ValueError("missing parameter '" + std::string(name) + "'");
  return entries_[it->second].second;
}

Tensor& ParamStore::get(std::string_view name) {
  return const_cast<Tensor&>(std::as_const(*this).get(name));
}

std::size_t ParamStore::total_elements() const {
  std::size_t n = 0;
  for (const auto& [name, t] : entries_) n += t.numel();
  return n;
}

std::vector<Tensor> ParamStore::tensors() const {
  std::vector<Tensor> out;
  out.reserve(entries_.size());
  for (const auto& [name, t] : entries_) out.push_back(t);
  return out;
}

ParamStore ParamStore::to(DType dt) const {
  ParamStore out;
  for (const auto& [name, t] : entries_) out.add(name, t.to(dt).detach());
  return out;
}

void ParamStore::set_requires_grad(bool on) {
  for (auto& [name, t] : entries_) t.set_requires_grad(on);
}

void ParamStore::zero_grad() {
  for (auto& [name, t] : entries_) t.zero_grad();
}

// ---------------------------------------------------------------------------
// Layer table

namespace {

struct ConvLayer {
  std::string name;
  int cin, cout, k;
  // Output area relative to the LR grid.
  int area_factor = 1;
};

std::vector<ConvLayer> conv_layers(const CtunConfig& cfg) {
  const int c = cfg.channels;
  std::vector<ConvLayer> out;
  auto blocks = [&](const std::string& prefix, int count) {
    for (int i = 0; i < count; ++i) {
      const std::string b = prefix + ".block" + std::to_string(i);
      out.push_back({b + ".conv0", c, c, 3});
      out.push_back({b + ".conv1", c, c, 3});
    }
  };
  out.push_back({"extract.conv_in", 3, c, 3});
  blocks("extract", cfg.blocks.extractor);
  for (int j = 0; j < 3; ++j) {
    const std::string s = "icam.seb" + std::to_string(j);
    out.push_back({s + ".conv0", c, c, 3});
    out.push_back({s + ".conv1", c, c, 3});
    out.push_back({s + ".gate", 2, 1, 7});
  }
  out.push_back({"prop.conv_in", 3 * c, c, 3});
  blocks("prop", cfg.blocks.propagation);
  const int r = cfg.reduced_channels();
  out.push_back({"hu.fuse", 3 * c, c, 1});
  out.push_back({"hu.encoder.ca_reduce", c, r, 1, 0});
  out.push_back({"hu.encoder.ca_expand", r, c, 1, 0});
  out.push_back({"hu.encoder.gate", 2, 1, 7});
  if (cfg.ugru_variant == UgruVariant::split) out.push_back({"hu.ugru.expand", c, 3 * c, 1});
  out.push_back({"hu.ugru.conv_z", c, c, 3});
  out.push_back({"hu.ugru.conv_w", c, c, 3});
  out.push_back({"hu.ugru.conv_q", c, c, 3});
  out.push_back({"recon.conv_in", 3 * c, c, 3});
  blocks("recon", cfg.blocks.reconstruction);
  int area = 1;
  for (int s = 0; s < cfg.upsample_stages(); ++s) {
    out.push_back({"recon.up" + std::to_string(s), c, 4 * c, 3, area});
    area *= 4;
  }
  out.push_back({"recon.conv_out", c, 3, 3, area});
  return out;
}

std::uint64_t fnv1a(std::string_view s, std::uint64_t seed) {
  std::uint64_t h = 1469598103934665603ULL ^ seed;
  for (char ch : s) {
    h ^= static_cast<unsigned char>(ch);
    h *= 1099511628211ULL;
  }
  return h;
}

}  // namespace

std::vector<ParamSpec> layer_table(const CtunConfig& cfg) {
  cfg.validate();
  const int c = cfg.channels;
  std::vector<ParamSpec> out;
  auto conv = [&](const ConvLayer& l) {
    out.push_back({l.name + ".weight", Shape{l.cout, l.cin, l.k, l.k}, ParamSpec::Kind::conv_weight,
                   l.cin * l.k * l.k});
    out.push_back({l.name + ".bias", Shape{1, l.cout, 1, 1}, ParamSpec::Kind::conv_bias, 0});
  };
  const auto convs = conv_layers(cfg);
  // Norm layers sit between the extractor and the ICAM SEBs.
  for (const auto& l : convs) {
    if (l.name == "icam.seb0.conv0") {
      for (int j = 0; j < 3; ++j) {
        const std::string n = "icam.ln" + std::to_string(j);
        out.push_back({n + ".gamma", Shape{1, c, 1, 1}, ParamSpec::Kind::norm_gamma, 0});
        out.push_back({n + ".beta", Shape{1, c, 1, 1}, ParamSpec::Kind::norm_beta, 0});
      }
    }
    conv(l);
  }
  return out;
}

ParamStore init_params(const CtunConfig& cfg, std::uint64_t seed, DType dt) {
  ParamStore store;
  for (const auto& spec : layer_table(cfg)) {
    switch (spec.kind) {
      case ParamSpec::Kind::conv_weight: {
        std::mt19937_64 rng(fnv1a(spec.name, seed));
        const double bound = 1.0 / std::sqrt(static_cast<double>(spec.fan_in));
        store.add(spec.name, Tensor::uniform(spec.shape, rng, -bound, bound, dt));
        break;
      }
      case ParamSpec::Kind::norm_gamma:
        store.add(spec.name, Tensor::ones(spec.shape, dt));
        break;
      default:
        store.add(spec.name, Tensor::zeros(spec.shape, dt));
    }
  }
  return store;
}

ParamStore zero_params(const CtunConfig& cfg, DType dt) {
  ParamStore store;
  for (const auto& spec : layer_table(cfg)) store.add(spec.name, Tensor::zeros(spec.shape, dt));
  return store;
}

void check_params(const CtunConfig& cfg, const ParamStore& params) {
  const auto table = layer_table(cfg);
  for (const auto& spec : table) {
    if (!params.contains(spec.name)) throw ValueError("missing parameter '" + spec.name + "'");
    const Shape& s = params.get(spec.name).shape();
    if (!(s == spec.shape))
      throw DimensionError("parameter '" + spec.name + "' has shape " + s.str() + ", expected " +
                           spec.shape.str());
  }
  if (params.size() != table.size())
    throw ValueError("parameter store holds " + std::to_string(params.size()) +
                     " tensors, configuration expects " + std::to_string(table.size()));
}

std::size_t param_count(const CtunConfig& cfg) {
  cfg.validate();
  const std::size_t c = static_cast<std::size_t>(cfg.channels);
  const std::size_t r = static_cast<std::size_t>(cfg.reduced_channels());
  auto conv = [](std::size_t k, std::size_t cin, std::size_t cout) { return k * k * cin * cout + cout; };
  auto res_blocks = [&](int n) { return static_cast<std::size_t>(n) * 2 * conv(3, c, c); };

  const std::size_t extractor = conv(3, 3, c) + res_blocks(cfg.blocks.extractor);
  const std::size_t icam = 3 * (2 * c) + 3 * (2 * conv(3, c, c) + conv(7, 2, 1));
  const std::size_t propagation = conv(3, 3 * c, c) + res_blocks(cfg.blocks.propagation);
  std::size_t hidden = conv(1, 3 * c, c) + conv(1, c, r) + conv(1, r, c) + conv(7, 2, 1) +
                       3 * conv(3, c, c);
  if (cfg.ugru_variant == UgruVariant::split) hidden += conv(1, c, 3 * c);
  const std::size_t recon = conv(3, 3 * c, c) + res_blocks(cfg.blocks.reconstruction) +
                            static_cast<std::size_t>(cfg.upsample_stages()) * conv(3, c, 4 * c) +
                            conv(3, c, 3);
  return extractor + icam + propagation + hidden + recon;
}

std::vector<LayerRow> describe(const CtunConfig& cfg) {
  const int c = cfg.channels;
  std::vector<LayerRow> rows;
  for (const auto& l : conv_layers(cfg)) {
    if (l.name == "icam.seb0.conv0") {
      for (int j = 0; j < 3; ++j)
        rows.push_back({"icam.ln" + std::to_string(j), Shape{1, c, 1, 1},
                        2 * static_cast<std::size_t>(c), 0, 0});
    }
    LayerRow row;
    row.name = l.name;
    row.weight = Shape{l.cout, l.cin, l.k, l.k};
    row.params = static_cast<std::size_t>(l.k) * l.k * l.cin * l.cout + l.cout;
    const std::uint64_t flops = 2ULL * l.k * l.k * l.cin * l.cout;
    // The channel-attention convs act on a pooled 1x1 map.
    if (l.area_factor == 0)
      row.flops_fixed = flops;
    else
      row.flops_per_pixel = flops * static_cast<std::uint64_t>(l.area_factor);
    rows.push_back(row);
  }
  return rows;
}

std::string describe_text(const CtunConfig& cfg) {
  std::ostringstream os;
  os << std::left << std::setw(28) << "layer" << std::setw(18) << "shape" << std::right
     << std::setw(10) << "params" << std::setw(14) << "flops/pixel" << '\n';
  std::size_t total = 0;
  std::uint64_t flops = 0;
  for (const auto& r : describe(cfg)) {
    os << std::left << std::setw(28) << r.name << std::setw(18) << r.weight.str() << std::right
       << std::setw(10) << r.params << std::setw(14) << r.flops_per_pixel << '\n';
    total += r.params;
    flops += r.flops_per_pixel;
  }
  os << std::left << std::setw(46) << "total" << std::right << std::setw(10) << total
     << std::setw(14) << flops << '\n';
  return os.str();
}

// ---------------------------------------------------------------------------
// Blocks

namespace {

Tensor conv(const Tensor& x, const ParamStore& p, const std::string& name) {
  const Tensor& w = p.get(name + ".weight");
  return conv2d(x, w, p.get(name + ".bias"), 1, w.shape().h / 2);
}

void require_features(const Tensor& x, int channels, const char* what) {
  if (x.shape().c != channels)
    throw DimensionError(std::string(what) + ": expected " + std::to_string(channels) +
                         " channels, got " + x.shape().str());
}

}  // namespace

Tensor residual_block(const Tensor& x, const ParamStore& p, const std::string& prefix) {
  return add(x, conv(relu(conv(x, p, prefix + ".conv0")), p, prefix + ".conv1"));
}

Tensor spatial_gate(const Tensor& y, const ParamStore& p, const std::string& prefix) {
  const Tensor g = sigmoid(conv(concat_channels({channel_mean(y), channel_max(y)}), p, prefix));
  return mul(y, tile_channels(g, y.shape().c));
}

Tensor seb_forward(const Tensor& x, const ParamStore& p, const std::string& prefix) {
  const Tensor y0 = leaky_relu(conv(x, p, prefix + ".conv0"), 0.1);
  const Tensor y1 = conv(y0, p, prefix + ".conv1");
  return add(x, spatial_gate(y1, p, prefix + ".gate"));
}

Tensor extract_features(const Tensor& frame, const ParamStore& p, const CtunConfig& cfg) {
  require_features(frame, 3, "extract_features");
  Tensor f = conv(frame, p, "extract.conv_in");
  for (int i = 0; i < cfg.blocks.extractor; ++i)
    f = residual_block(f, p, "extract.block" + std::to_string(i));
  return f;
}

CascadeOutputs icam_cascade(const Tensor& f_prev, const Tensor& f_cur, const Tensor& f_next,
                            const ParamStore& p) {
  if (!(f_prev.shape() == f_cur.shape()) || !(f_next.shape() == f_cur.shape()))
    throw DimensionError("icam_cascade: inputs " + f_prev.shape().str() + ", " +
                         f_cur.shape().str() + ", " + f_next.shape().str() + " differ");
  const std::array<const Tensor*, 3> in{&f_prev, &f_cur, &f_next};
  std::array<Tensor, 3> out;
  Tensor carry;
  for (int j = 0; j < 3; ++j) {
    const std::string ln = "icam.ln" + std::to_string(j);
    Tensor x = layer_norm(*in[j], p.get(ln + ".gamma"), p.get(ln + ".beta"));
    if (carry.defined()) x = add(x, carry);
    out[j] = seb_forward(x, p, "icam.seb" + std::to_string(j));
    carry = out[j];
  }
  return {out[0], out[1], out[2]};
}

Tensor gate_fuse(const Tensor& a_prev, const Tensor& a_cur, const Tensor& a_next) {
  return add(mul(sigmoid(a_prev), a_cur), mul(sigmoid(a_next), a_cur));
}

Tensor align(const Tensor& f_prev, const Tensor& f_cur, const Tensor& f_next, const ParamStore& p) {
  const auto a = icam_cascade(f_prev, f_cur, f_next, p);
  return gate_fuse(a.prev, a.cur, a.next);
}

Tensor propagate_forward(const Tensor& f, const Tensor& f_aligned, const Tensor& prev_state,
                         const ParamStore& p, const CtunConfig& cfg) {
  Tensor h = conv(concat_channels({f, f_aligned, prev_state}), p, "prop.conv_in");
  for (int i = 0; i < cfg.blocks.propagation; ++i)
    h = residual_block(h, p, "prop.block" + std::to_string(i));
  return h;
}

Tensor propagate_timestep(int t, const Tensor& f, const Tensor& f_aligned,
                          const Tensor& prev_state, const ParamStore& p, const CtunConfig& cfg) {
  if (t == 0) {
    for (double v : prev_state.to_vector())
      if (v != 0.0) throw ValueError("propagation at t=0 requires an all-zero hidden state");
  }
  return propagate_forward(f, f_aligned, prev_state, p, cfg);
}

Tensor channel_attention_scales(const Tensor& m, const ParamStore& p) {
  const Tensor pooled = global_avg_pool(m);
  return sigmoid(conv(relu(conv(pooled, p, "hu.encoder.ca_reduce")), p, "hu.encoder.ca_expand"));
}

Tensor encode_hidden(const Tensor& f_next, const Tensor& h, const Tensor& f_aligned,
                     const ParamStore& p) {
  const Tensor m = conv(concat_channels({f_next, h, f_aligned}), p, "hu.fuse");
  const Shape& s = m.shape();
  const Tensor ca = mul(m, expand_spatial(channel_attention_scales(m, p), s.h, s.w));
  return add(m, spatial_gate(ca, p, "hu.encoder.gate"));
}

Tensor gru_combine(const Tensor& z, const Tensor& w, const Tensor& q, const Tensor& h) {
  const Tensor keep = add_scalar(scale(w, -1.0), 1.0);
  return add(mul(mul(z, h), keep), mul(q, w));
}

Tensor ugru_update(const Tensor& m, const Tensor& h, const ParamStore& p, UgruVariant variant) {
  Tensor mp, mc, mu;
  switch (variant) {
    case UgruVariant::split: {
      const int c = m.shape().c;
      const std::array<int, 3> sizes{c, c, c};
      auto parts = split_channels(conv(m, p, "hu.ugru.expand"), sizes);
      mp = parts[0];
      mc = parts[1];
      mu = parts[2];
      break;
    }
    case UgruVariant::shared:
      mp = mc = mu = m;
      break;
    default:
      throw ValueError("unknown ugru variant");
  }
  const Tensor z = sigmoid(conv(mp, p, "hu.ugru.conv_z"));
  const Tensor w = sigmoid(conv(mu, p, "hu.ugru.conv_w"));
  const Tensor q = tanh_(conv(mc, p, "hu.ugru.conv_q"));
  return gru_combine(z, w, q, h);
}

Tensor reconstruct(const Tensor& f, const Tensor& f_aligned, const Tensor& h, const Tensor& frame,
                   const ParamStore& p, const CtunConfig& cfg) {
  require_features(frame, 3, "reconstruct");
  Tensor y = conv(concat_channels({f, f_aligned, h}), p, "recon.conv_in");
  for (int i = 0; i < cfg.blocks.reconstruction; ++i)
    y = residual_block(y, p, "recon.block" + std::to_string(i));
  for (int s = 0; s < cfg.upsample_stages(); ++s)
    y = pixel_shuffle(conv(y, p, "recon.up" + std::to_string(s)), 2);
  y = conv(y, p, "recon.conv_out");
  return add(y, bilinear_resize(frame, cfg.scale));
}

// ---------------------------------------------------------------------------
// Sequence driver

const char* to_string(Stage s) {
  switch (s) {
    case Stage::extract: return "extract";
    case Stage::align: return "align";
    case Stage::propagate: return "propagate";
    case Stage::hidden_update: return "hidden_update";
    case Stage::reconstruct: return "reconstruct";
  }
  return "?";
}

namespace {

// Lazily extracted frames/features for indices [t-1, t+1], evicted as t advances.
class FeatureWindow {
 public:
  FeatureWindow(int n, const FrameSource& source, const ParamStore& p, const CtunConfig& cfg,
                const StageCallback& on_stage)
      : n_(n), source_(source), p_(p), cfg_(cfg), on_stage_(on_stage) {}

  const Tensor& frame(int i) { return load(i).frame; }
  const Tensor& feature(int i) { return load(i).feature; }

  // Drops everything below index `lo`.
  void evict_below(int lo) { slots_.erase(slots_.begin(), slots_.lower_bound(lo)); }

 private:
  struct Slot {
    Tensor frame, feature;
  };

  Slot& load(int i) {
    i = std::clamp(i, 0, n_ - 1);
    auto it = slots_.find(i);
    if (it != slots_.end()) return it->second;
    Tensor x = source_(i);
    if (!x.defined()) throw ValueError("frame source returned no tensor for frame " + std::to_string(i));
    if (shape_.n == 0) {
      shape_ = x.shape();
    } else if (!(x.shape() == shape_)) {
      throw DimensionError("frame " + std::to_string(i) + " has shape " + x.shape().str() +
                           ", frame 0 has " + shape_.str());
    }
    const std::uint64_t before = MacCounter::global().value();
    Tensor f = extract_features(x, p_, cfg_);
    if (on_stage_)
      on_stage_({Stage::extract, current_t, i, MacCounter::global().value() - before});
    return slots_.emplace(i, Slot{std::move(x), std::move(f)}).first->second;
  }

 public:
  int current_t = 0;

 private:
  int n_;
  const FrameSource& source_;
  const ParamStore& p_;
  const CtunConfig& cfg_;
  const StageCallback& on_stage_;
  Shape shape_{0, 0, 0, 0};
  std::map<int, Slot> slots_;
};

}  // namespace

void run_sequence(int num_frames, const FrameSource& source, const FrameSink& sink,
                  const ParamStore& p, const CtunConfig& cfg, const StageCallback& on_stage) {
  cfg.validate();
  if (num_frames < 1) throw ValueError("frame sequence is empty");
  check_params(cfg, p);

  FeatureWindow window(num_frames, source, p, cfg, on_stage);
  auto& macs = MacCounter::global();
  auto report = [&](Stage s, int t, int frame, std::uint64_t before) {
    if (on_stage) on_stage({s, t, frame, macs.value() - before});
  };

  Tensor state;  // m_{t-1}
  for (int t = 0; t < num_frames; ++t) {
    window.current_t = t;
    window.evict_below(t - 1);
    const Tensor& x = window.frame(t);
    const Tensor f_prev = window.feature(t - 1);
    const Tensor f = window.feature(t);
    const Tensor f_next = window.feature(t + 1);
    if (t == 0) state = Tensor::zeros(Shape{f.shape().n, cfg.channels, f.shape().h, f.shape().w}, f.dtype());

    std::uint64_t before = macs.value();
    const Tensor fa = align(f_prev, f, f_next, p);
    report(Stage::align, t, t, before);

    before = macs.value();
    const Tensor h = propagate_timestep(t, f, fa, state, p, cfg);
    report(Stage::propagate, t, t, before);

    if (t + 1 < num_frames) {
      before = macs.value();
      state = ugru_update(encode_hidden(f_next, h, fa, p), h, p, cfg.ugru_variant);
      report(Stage::hidden_update, t, t + 1, before);
    } else {
      state = Tensor();
    }

    before = macs.value();
    Tensor y = reconstruct(f, fa, h, x, p, cfg);
    report(Stage::reconstruct, t, t, before);
    sink(t, std::move(y));
  }
}

FrameSequence super_resolve_sequence(const FrameSequence& frames, const ParamStore& p,
                                     const CtunConfig& cfg) {
  frames.validate();
  FrameSequence out;
  out.fps = frames.fps;
  out.frames.resize(frames.size());
  run_sequence(
      static_cast<int>(frames.size()), [&](int i) { return frames.frames[i]; },
      [&](int i, Tensor y) { out.frames[i] = std::move(y); }, p, cfg);
  return out;
}

}  // namespace ctun
