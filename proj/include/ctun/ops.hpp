#pragma once

#include <span>
#include <vector>

#include "ctun/tensor.hpp"

// Differentiable tensor operations. Every op checks shapes and dtypes up front
// and throws DimensionError / ValueError; no op broadcasts.
namespace ctun {

/// Zero-padded cross-correlation. `w` is [Cout, Cin, kh, kw] with odd kernel
/// sides; `b` is either undefined or holds Cout values (any shape with
/// numel == Cout). The output side must divide exactly by `stride`.
Tensor conv2d(const Tensor& x, const Tensor& w, const Tensor& b, int stride = 1, int pad = 0);

// kh = kw = 1, pad 0, stride 1.
Tensor conv1x1(const Tensor& x, const Tensor& w, const Tensor& b);

/// Per-sample normalization over (C, H, W) jointly followed by a per-channel
/// affine; gamma and beta hold C values each.
Tensor layer_norm(const Tensor& x, const Tensor& gamma, const Tensor& beta, double eps = 1e-5);

// out[n, c, r*h+dy, r*w+dx] = x[n, c*r*r + dy*r + dx, h, w]
Tensor pixel_shuffle(const Tensor& x, int r);
Tensor pixel_unshuffle(const Tensor& x, int r);

/// Bilinear resampling with half-pixel centers and edge clamping. The output
/// extent is round(H*scale) x round(W*scale).
Tensor bilinear_resize(const Tensor& x, double scale);

Tensor concat_channels(const std::vector<Tensor>& xs);
std::vector<Tensor> split_channels(const Tensor& x, std::span<const int> sizes);

Tensor sigmoid(const Tensor& x);
Tensor tanh_(const Tensor& x);
Tensor leaky_relu(const Tensor& x, double slope);
Tensor relu(const Tensor& x);
Tensor sqrt_(const Tensor& x);
Tensor abs_(const Tensor& x);

Tensor add(const Tensor& a, const Tensor& b);
Tensor sub(const Tensor& a, const Tensor& b);
Tensor mul(const Tensor& a, const Tensor& b);
Tensor scale(const Tensor& x, double s);
Tensor add_scalar(const Tensor& x, double s);

// Reductions to a [1,1,1,1] scalar.
Tensor sum(const Tensor& x);
Tensor mean(const Tensor& x);

// [N,C,H,W] -> [N,1,H,W]
Tensor channel_mean(const Tensor& x);
// Ties resolve to the lowest channel index.
Tensor channel_max(const Tensor& x);
// [N,1,H,W] -> [N,C,H,W] by repeating the single channel.
Tensor tile_channels(const Tensor& x, int channels);
// [N,C,H,W] -> [N,C,1,1]
Tensor global_avg_pool(const Tensor& x);
// [N,C,1,1] -> [N,C,H,W]
Tensor expand_spatial(const Tensor& x, int h, int w);

// Crop of the spatial window [top, top+h) x [left, left+w).
Tensor crop(const Tensor& x, int top, int left, int h, int w);

}  // namespace ctun
