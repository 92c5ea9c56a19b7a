#pragma once

#include <cstdint>
#include <functional>
#include <string>
#include <string_view>
#include <unordered_map>
#include <utility>
#include <vector>

#include "ctun/frames.hpp"
#include "ctun/tensor.hpp"

namespace ctun {

// Hidden-update gate layout: `split` expands m to 3C and gates each third,
// `shared` computes all three gates from m directly.
enum class UgruVariant { split, shared };
enum class BoundaryPolicy { replicate };

const char* to_string(UgruVariant v);
UgruVariant parse_ugru_variant(std::string_view s);

struct BlockCounts {
  int extractor = 3;
  int propagation = 5;
  int reconstruction = 3;
};

struct CtunConfig {
  int channels = 64;
  BlockCounts blocks;
  int scale = 4;
  UgruVariant ugru_variant = UgruVariant::split;
  BoundaryPolicy boundary_policy = BoundaryPolicy::replicate;

  void validate() const;
  // Channel-attention bottleneck width inside the hidden encoder.
  int reduced_channels() const { return channels >= 4 ? channels / 4 : 1; }
  // Number of x2 pixel-shuffle stages.
  int upsample_stages() const { return scale == 4 ? 2 : 1; }
};

/// Named parameter tensors in insertion order.
class ParamStore {
 public:
  void add(std::string name, Tensor t);
  bool contains(std::string_view name) const;
  const Tensor& get(std::string_view name) const;
  Tensor& get(std::string_view name);

  std::size_t size() const { return entries_.size(); }
  std::size_t total_elements() const;
  const std::vector<std::pair<std::string, Tensor>>& entries() const { return entries_; }
  std::vector<Tensor> tensors() const;

  ParamStore to(DType dt) const;
  void set_requires_grad(bool on);
  void zero_grad();

 private:
  std::vector<std::pair<std::string, Tensor>> entries_;
  std::unordered_map<std::string, std::size_t> index_;
};

/// One parameter tensor of the network, as listed by layer_table().
struct ParamSpec {
  std::string name;
  Shape shape;
  enum class Kind { conv_weight, conv_bias, norm_gamma, norm_beta } kind;
  int fan_in = 0;
};

std::vector<ParamSpec> layer_table(const CtunConfig& cfg);

// Fan-in scaled uniform conv weights, zero biases, unit gamma, zero beta.
// Each tensor draws from its own generator keyed by (seed, name), so shared
// names get identical values across variants.
ParamStore init_params(const CtunConfig& cfg, std::uint64_t seed, DType dt = DType::f32);
ParamStore zero_params(const CtunConfig& cfg, DType dt = DType::f32);

// Throws naming the first missing or mis-shaped tensor.
void check_params(const CtunConfig& cfg, const ParamStore& params);

// Closed-form parameter count.
std::size_t param_count(const CtunConfig& cfg);

/// Convolution / normalization layer row for describe().
struct LayerRow {
  std::string name;
  Shape weight;
  std::size_t params = 0;
  // FLOPs per LR input pixel (2 per MAC; the layer's output resolution
  // relative to the LR grid is folded in).
  std::uint64_t flops_per_pixel = 0;
  // FLOPs per sample that do not scale with the frame area (convs on the
  // globally pooled map).
  std::uint64_t flops_fixed = 0;
};

std::vector<LayerRow> describe(const CtunConfig& cfg);
std::string describe_text(const CtunConfig& cfg);

// ---------------------------------------------------------------------------
// Building blocks. `prefix` selects the parameter group, e.g. "extract.block0".

Tensor residual_block(const Tensor& x, const ParamStore& p, const std::string& prefix);
// CBAM-style spatial gate: y * tile(sigmoid(conv7x7([mean_c(y), max_c(y)]))).
Tensor spatial_gate(const Tensor& y, const ParamStore& p, const std::string& prefix);
Tensor seb_forward(const Tensor& x, const ParamStore& p, const std::string& prefix);

Tensor extract_features(const Tensor& frame, const ParamStore& p, const CtunConfig& cfg);

struct CascadeOutputs {
  Tensor prev, cur, next;
};
CascadeOutputs icam_cascade(const Tensor& f_prev, const Tensor& f_cur, const Tensor& f_next,
                            const ParamStore& p);
// sigmoid(a_prev) * a_cur + sigmoid(a_next) * a_cur
Tensor gate_fuse(const Tensor& a_prev, const Tensor& a_cur, const Tensor& a_next);
Tensor align(const Tensor& f_prev, const Tensor& f_cur, const Tensor& f_next, const ParamStore& p);

Tensor propagate_forward(const Tensor& f, const Tensor& f_aligned, const Tensor& prev_state,
                         const ParamStore& p, const CtunConfig& cfg);
// Same as propagate_forward, but enforces that the state entering t = 0 is
// exactly zero.
Tensor propagate_timestep(int t, const Tensor& f, const Tensor& f_aligned,
                          const Tensor& prev_state, const ParamStore& p, const CtunConfig& cfg);

Tensor channel_attention_scales(const Tensor& m, const ParamStore& p);
Tensor encode_hidden(const Tensor& f_next, const Tensor& h, const Tensor& f_aligned,
                     const ParamStore& p);
// z * h * (1 - w) + q * w
Tensor gru_combine(const Tensor& z, const Tensor& w, const Tensor& q, const Tensor& h);
Tensor ugru_update(const Tensor& m, const Tensor& h, const ParamStore& p, UgruVariant variant);

Tensor reconstruct(const Tensor& f, const Tensor& f_aligned, const Tensor& h, const Tensor& frame,
                   const ParamStore& p, const CtunConfig& cfg);

// ---------------------------------------------------------------------------
// Sequence driver

enum class Stage { extract, align, propagate, hidden_update, reconstruct };
const char* to_string(Stage s);

/// Reported after each stage: `t` is the timestep being processed, `frame`
/// the frame index whose data the stage consumed (for extract and
/// hidden_update this differs from t), `macs` the convolution MACs it spent.
struct StageEvent {
  Stage stage;
  int t;
  int frame;
  std::uint64_t macs;
};
using StageCallback = std::function<void(const StageEvent&)>;

// Returns LR frame `index` as [B, 3, H, W]; called once per index.
using FrameSource = std::function<Tensor(int index)>;
using FrameSink = std::function<void(int index, Tensor output)>;

/// Streams a sequence through the network in one forward pass. Only the
/// three-frame feature window and the previous updated hidden state are held
/// between steps, so working memory does not grow with the frame count.
void run_sequence(int num_frames, const FrameSource& source, const FrameSink& sink,
                  const ParamStore& p, const CtunConfig& cfg,
                  const StageCallback& on_stage = nullptr);

FrameSequence super_resolve_sequence(const FrameSequence& frames, const ParamStore& p,
                                     const CtunConfig& cfg);

}  // namespace ctun
