#pragma once

#include <filesystem>
#include <map>
#include <string>

#include "ctun/model.hpp"
#include "ctun/trainer.hpp"

namespace ctun {

using KeyValues = std::map<std::string, std::string>;

/// Flat `key = value` lines; `#` starts a comment, blank lines are ignored.
/// Duplicate keys and lines without `=` are errors naming the line.
KeyValues parse_key_values(const std::string& text);
KeyValues read_key_values(const std::filesystem::path& path);

/// Applies keys named after CtunConfig and TrainConfig fields:
///   channels, blocks (e.g. "3,5,3"), scale, ugru_variant, boundary_policy,
///   lr0, lr_min, beta1, beta2, adam_eps, iters, patch, batch, frames,
///   lr_size, sequences, charbonnier_eps, fft_weight, seed.
/// Unknown keys and unparsable values throw ValueError.
void apply_config(const KeyValues& kv, CtunConfig& model, TrainConfig& train);

/// Reads the architecture back from parameter names and shapes: channels
/// from extract.conv_in, block counts, hidden-update variant and scale.
CtunConfig infer_model_config(const ParamStore& params);

// Model keys only, one per line, in the form accepted above.
std::string format_model_config(const CtunConfig& cfg);

}  // namespace ctun
