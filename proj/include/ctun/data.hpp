#pragma once

#include <filesystem>
#include <string>
#include <vector>

#include "ctun/frames.hpp"
#include "ctun/model.hpp"
#include "ctun/tensor.hpp"

namespace ctun {

enum class DegradationMode { BI, BD };

struct DegradationSpec {
  DegradationMode mode = DegradationMode::BI;
  int scale = 4;
  double sigma = 1.6;

  void validate() const;
};

DegradationMode parse_degradation_mode(const std::string& s);
const char* to_string(DegradationMode m);

/// MATLAB imresize-style bicubic resampling: cubic kernel with a = -0.5,
/// half-pixel centers, replicated edges. When shrinking with `antialias`,
/// the kernel is stretched by 1/scale and its weights renormalized. The
/// output extent is ceil(H*scale) x ceil(W*scale) and must cover at least one
/// whole pixel on each axis; horizontal pass first.
Tensor bicubic_resize(const Tensor& x, double scale, bool antialias = true);

// Normalized taps for offsets -r..r with r = floor(4*sigma).
std::vector<double> gaussian_kernel(double sigma);

/// Separable Gaussian blur with reflected borders (edge pixel not repeated).
Tensor gaussian_blur(const Tensor& x, double sigma);

// Single frame; output clamped to [0, 1].
Tensor degrade_frame(const Tensor& hr, const DegradationSpec& spec);
FrameSequence degrade(const FrameSequence& seq, const DegradationSpec& spec);

/// BT.601 limited-range luma in 0-255 units:
/// 65.481 R + 128.553 G + 24.966 B + 16 for RGB in [0, 1].
Tensor rgb_to_y(const Tensor& x);

// 8-bit RGB PNG <-> [1, 3, H, W] float32 in [0, 1].
Tensor load_png(const std::filesystem::path& path);
void save_png(const Tensor& frame, const std::filesystem::path& path);

/// Reads frame_000000.png, frame_000001.png, ... The numbering must be
/// contiguous from 0.
FrameSequence load_sequence(const std::filesystem::path& dir);
// Creates `dir` if needed.
void save_sequence(const FrameSequence& seq, const std::filesystem::path& dir);
std::string frame_filename(int index);

/// Binary weight file: "CTUN", u32 version = 1, u32 tensor count, then per
/// tensor u32 name length, name bytes, u8 rank, u32 dims, float32 payload,
/// and a trailing CRC32 of every preceding byte. All integers and floats are
/// little-endian. Tensors are stored with rank 4 and loaded as float32.
void save_weights(const ParamStore& store, const std::filesystem::path& path);
ParamStore load_weights(const std::filesystem::path& path);

std::vector<unsigned char> encode_weights(const ParamStore& store);
ParamStore decode_weights(const std::vector<unsigned char>& bytes);

}  // namespace ctun
