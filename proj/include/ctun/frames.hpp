#pragma once

#include <optional>
#include <string>
#include <vector>

#include "ctun/tensor.hpp"

namespace ctun {

/// Ordered RGB frames, each [1, 3, H, W] with values in [0, 1].
struct FrameSequence {
  std::vector<Tensor> frames;
  std::optional<double> fps;
  std::string source;

  std::size_t size() const { return frames.size(); }
  bool empty() const { return frames.empty(); }
  int height() const { return frames.at(0).shape().h; }
  int width() const { return frames.at(0).shape().w; }

  // Throws on an empty sequence, non-RGB frames, or mixed frame sizes.
  void validate() const;
};

}  // namespace ctun
