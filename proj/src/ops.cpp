#include "ctun/ops.hpp"

#include <algorithm>
#include <cmath>
#include <numeric>

#include "op_helpers.hpp"

namespace ctun {

using detail::attach_backward;
using detail::index4;
using detail::require_same_dtype;
using detail::require_same_shape;

namespace {

// y = fwd(x); dx = bwd(x, y, dy).
template <class Fwd, class Bwd>
Tensor unary(const Tensor& x, const char* name, Fwd fwd, Bwd bwd) {
  const DType dt = x.dtype();
  Buffer out(dt, x.numel());
  dispatch(dt, [&]<class T>() {
    auto xi = x.data<T>();
    auto o = out.span<T>();
    for (std::size_t i = 0; i < o.size(); ++i) o[i] = fwd(xi[i]);
  });
  Tensor res = make_result(x.shape(), std::move(out), {x}, nullptr, name);
  attach_backward(res, [dt, xb = x.shared_buffer(), yb = res.shared_buffer(),
                        bwd](const Buffer& gout) {
    std::vector<Buffer> grads(1);
    grads[0] = Buffer(dt, gout.size());
    dispatch(dt, [&]<class T>() {
      auto xi = std::as_const(*xb).template span<T>();
      auto yi = std::as_const(*yb).template span<T>();
      auto g = gout.span<T>();
      auto gx = grads[0].span<T>();
      for (std::size_t i = 0; i < g.size(); ++i) gx[i] = bwd(xi[i], yi[i], g[i]);
    });
    return grads;
  });
  return res;
}

// Channel-vector parameters (bias, gamma, beta) may be stored with any
// shape holding exactly C values.
void require_channel_vector(const Tensor& v, int c, const char* op, const char* what) {
  if (v.numel() != static_cast<std::size_t>(c))
    throw DimensionError(std::string(op) + ": " + what + " has " + std::to_string(v.numel()) +
                         " values for " + std::to_string(c) + " channels");
}

}  // namespace

// ---------------------------------------------------------------------------
// Elementwise

Tensor sigmoid(const Tensor& x) {
  return unary(
      x, "sigmoid",
      [](auto v) {
        using T = decltype(v);
        return T(1) / (T(1) + std::exp(-v));
      },
      [](auto, auto y, auto g) { return g * y * (decltype(y)(1) - y); });
}

Tensor tanh_(const Tensor& x) {
  return unary(
      x, "tanh", [](auto v) { return std::tanh(v); },
      [](auto, auto y, auto g) { return g * (decltype(y)(1) - y * y); });
}

Tensor leaky_relu(const Tensor& x, double slope) {
  return unary(
      x, "leaky_relu",
      [slope](auto v) {
        using T = decltype(v);
        return v >= T(0) ? v : static_cast<T>(slope) * v;
      },
      [slope](auto v, auto, auto g) {
        using T = decltype(v);
        return v >= T(0) ? g : static_cast<T>(slope) * g;
      });
}

Tensor relu(const Tensor& x) { return leaky_relu(x, 0.0); }

Tensor sqrt_(const Tensor& x) {
  return unary(
      x, "sqrt", [](auto v) { return std::sqrt(v); },
      [](auto, auto y, auto g) { return g / (decltype(y)(2) * y); });
}

Tensor abs_(const Tensor& x) {
  return unary(
      x, "abs", [](auto v) { return std::abs(v); },
      [](auto v, auto, auto g) {
        using T = decltype(v);
        return v > T(0) ? g : (v < T(0) ? -g : T(0));
      });
}

Tensor scale(const Tensor& x, double s) {
  return unary(
      x, "scale", [s](auto v) { return static_cast<decltype(v)>(s) * v; },
      [s](auto, auto, auto g) { return static_cast<decltype(g)>(s) * g; });
}

Tensor add_scalar(const Tensor& x, double s) {
  return unary(
      x, "add_scalar", [s](auto v) { return v + static_cast<decltype(v)>(s); },
      [](auto, auto, auto g) { return g; });
}

namespace {

enum class BinOp { add, sub, mul };

Tensor binary(const Tensor& a, const Tensor& b, BinOp op, const char* name) {
  require_same_shape(a, b, name);
  const DType dt = a.dtype();
  Buffer out(dt, a.numel());
  dispatch(dt, [&]<class T>() {
    auto x = a.data<T>();
    auto y = b.data<T>();
    auto o = out.span<T>();
    for (std::size_t i = 0; i < o.size(); ++i) {
      switch (op) {
        case BinOp::add: o[i] = x[i] + y[i]; break;
        case BinOp::sub: o[i] = x[i] - y[i]; break;
        case BinOp::mul: o[i] = x[i] * y[i]; break;
      }
    }
  });
  Tensor res = make_result(a.shape(), std::move(out), {a, b}, nullptr, name);
  const bool want_a = a.requires_grad(), want_b = b.requires_grad();
  attach_backward(res, [dt, op, want_a, want_b, ab = a.shared_buffer(),
                        bb = b.shared_buffer()](const Buffer& gout) {
    std::vector<Buffer> grads(2);
    dispatch(dt, [&]<class T>() {
      auto g = gout.span<T>();
      if (want_a) {
        grads[0] = Buffer(dt, g.size());
        auto ga = grads[0].span<T>();
        if (op == BinOp::mul) {
          auto y = std::as_const(*bb).template span<T>();
          for (std::size_t i = 0; i < g.size(); ++i) ga[i] = g[i] * y[i];
        } else {
          std::copy(g.begin(), g.end(), ga.begin());
        }
      }
      if (want_b) {
        grads[1] = Buffer(dt, g.size());
        auto gb = grads[1].span<T>();
        if (op == BinOp::mul) {
          auto x = std::as_const(*ab).template span<T>();
          for (std::size_t i = 0; i < g.size(); ++i) gb[i] = g[i] * x[i];
        } else if (op == BinOp::sub) {
          for (std::size_t i = 0; i < g.size(); ++i) gb[i] = -g[i];
        } else {
          std::copy(g.begin(), g.end(), gb.begin());
        }
      }
    });
    return grads;
  });
  return res;
}

}  // namespace

Tensor add(const Tensor& a, const Tensor& b) { return binary(a, b, BinOp::add, "add"); }
Tensor sub(const Tensor& a, const Tensor& b) { return binary(a, b, BinOp::sub, "sub"); }
Tensor mul(const Tensor& a, const Tensor& b) { return binary(a, b, BinOp::mul, "mul"); }

// ---------------------------------------------------------------------------
// Reductions

Tensor sum(const Tensor& x) {
  const DType dt = x.dtype();
  Buffer out(dt, 1);
  dispatch(dt, [&]<class T>() {
    double acc = 0.0;
    for (T v : x.data<T>()) acc += v;
    out.span<T>()[0] = static_cast<T>(acc);
  });
  Tensor res = make_result(Shape{}, std::move(out), {x}, nullptr, "sum");
  attach_backward(res, [dt, n = x.numel()](const Buffer& gout) {
    std::vector<Buffer> grads(1);
    grads[0] = Buffer(dt, n);
    dispatch(dt, [&]<class T>() {
      auto g = grads[0].span<T>();
      std::fill(g.begin(), g.end(), gout.span<T>()[0]);
    });
    return grads;
  });
  return res;
}

Tensor mean(const Tensor& x) { return scale(sum(x), 1.0 / static_cast<double>(x.numel())); }

Tensor channel_mean(const Tensor& x) {
  const Shape s = x.shape();
  const Shape os{s.n, 1, s.h, s.w};
  const DType dt = x.dtype();
  Buffer out(dt, os.numel());
  const std::size_t plane = s.plane();
  dispatch(dt, [&]<class T>() {
    auto xi = x.data<T>();
    auto o = out.span<T>();
    for (int n = 0; n < s.n; ++n)
      for (std::size_t p = 0; p < plane; ++p) {
        T acc = 0;
        for (int c = 0; c < s.c; ++c) acc += xi[(static_cast<std::size_t>(n) * s.c + c) * plane + p];
        o[n * plane + p] = acc / static_cast<T>(s.c);
      }
  });
  Tensor res = make_result(os, std::move(out), {x}, nullptr, "channel_mean");
  attach_backward(res, [s, dt, plane](const Buffer& gout) {
    std::vector<Buffer> grads(1);
    grads[0] = Buffer(dt, s.numel());
    dispatch(dt, [&]<class T>() {
      auto g = gout.span<T>();
      auto gx = grads[0].span<T>();
      for (int n = 0; n < s.n; ++n)
        for (int c = 0; c < s.c; ++c)
          for (std::size_t p = 0; p < plane; ++p)
            gx[(static_cast<std::size_t>(n) * s.c + c) * plane + p] =
                g[n * plane + p] / static_cast<T>(s.c);
    });
    return grads;
  });
  return res;
}

Tensor channel_max(const Tensor& x) {
  const Shape s = x.shape();
  const Shape os{s.n, 1, s.h, s.w};
  const DType dt = x.dtype();
  Buffer out(dt, os.numel());
  const std::size_t plane = s.plane();
  // argmax channel per output pixel, kept for the backward scatter
  auto arg = std::make_shared<std::vector<int>>(os.numel());
  dispatch(dt, [&]<class T>() {
    auto xi = x.data<T>();
    auto o = out.span<T>();
    for (int n = 0; n < s.n; ++n)
      for (std::size_t p = 0; p < plane; ++p) {
        int best = 0;
        T bv = xi[static_cast<std::size_t>(n) * s.c * plane + p];
        for (int c = 1; c < s.c; ++c) {
          const T v = xi[(static_cast<std::size_t>(n) * s.c + c) * plane + p];
          if (v > bv) {
            bv = v;
            best = c;
          }
        }
        o[n * plane + p] = bv;
        (*arg)[n * plane + p] = best;
      }
  });
  Tensor res = make_result(os, std::move(out), {x}, nullptr, "channel_max");
  attach_backward(res, [s, dt, plane, arg](const Buffer& gout) {
    std::vector<Buffer> grads(1);
    grads[0] = Buffer(dt, s.numel());
    dispatch(dt, [&]<class T>() {
      auto g = gout.span<T>();
      auto gx = grads[0].span<T>();
      for (int n = 0; n < s.n; ++n)
        for (std::size_t p = 0; p < plane; ++p)
          gx[(static_cast<std::size_t>(n) * s.c + (*arg)[n * plane + p]) * plane + p] =
              g[n * plane + p];
    });
    return grads;
  });
  return res;
}

Tensor tile_channels(const Tensor& x, int channels) {
  const Shape s = x.shape();
  if (s.c != 1) throw DimensionError("tile_channels: input must have 1 channel, got " + s.str());
  if (channels < 1) throw ValueError("tile_channels: channel count must be >= 1");
  const Shape os{s.n, channels, s.h, s.w};
  const DType dt = x.dtype();
  const std::size_t plane = s.plane();
  Buffer out(dt, os.numel());
  dispatch(dt, [&]<class T>() {
    auto xi = x.data<T>();
    auto o = out.span<T>();
    for (int n = 0; n < s.n; ++n)
      for (int c = 0; c < channels; ++c)
        std::copy_n(xi.begin() + n * plane, plane,
                    o.begin() + (static_cast<std::size_t>(n) * channels + c) * plane);
  });
  Tensor res = make_result(os, std::move(out), {x}, nullptr, "tile_channels");
  attach_backward(res, [s, dt, plane, channels](const Buffer& gout) {
    std::vector<Buffer> grads(1);
    grads[0] = Buffer(dt, s.numel());
    dispatch(dt, [&]<class T>() {
      auto g = gout.span<T>();
      auto gx = grads[0].span<T>();
      for (int n = 0; n < s.n; ++n)
        for (int c = 0; c < channels; ++c)
          for (std::size_t p = 0; p < plane; ++p)
            gx[n * plane + p] += g[(static_cast<std::size_t>(n) * channels + c) * plane + p];
    });
    return grads;
  });
  return res;
}

Tensor global_avg_pool(const Tensor& x) {
  const Shape s = x.shape();
  const Shape os{s.n, s.c, 1, 1};
  const DType dt = x.dtype();
  const std::size_t plane = s.plane();
  Buffer out(dt, os.numel());
  dispatch(dt, [&]<class T>() {
    auto xi = x.data<T>();
    auto o = out.span<T>();
    for (std::size_t nc = 0; nc < os.numel(); ++nc) {
      double acc = 0.0;
      for (std::size_t p = 0; p < plane; ++p) acc += xi[nc * plane + p];
      o[nc] = static_cast<T>(acc / static_cast<double>(plane));
    }
  });
  Tensor res = make_result(os, std::move(out), {x}, nullptr, "global_avg_pool");
  attach_backward(res, [s, dt, plane](const Buffer& gout) {
    std::vector<Buffer> grads(1);
    grads[0] = Buffer(dt, s.numel());
    dispatch(dt, [&]<class T>() {
      auto g = gout.span<T>();
      auto gx = grads[0].span<T>();
      const T inv = T(1) / static_cast<T>(plane);
      for (std::size_t nc = 0; nc < g.size(); ++nc)
        std::fill_n(gx.begin() + nc * plane, plane, g[nc] * inv);
    });
    return grads;
  });
  return res;
}

Tensor expand_spatial(const Tensor& x, int h, int w) {
  const Shape s = x.shape();
  if (s.h != 1 || s.w != 1)
    throw DimensionError("expand_spatial: input must be [N,C,1,1], got " + s.str());
  const Shape os{s.n, s.c, h, w};
  validate_shape(os);
  const DType dt = x.dtype();
  const std::size_t plane = os.plane();
  Buffer out(dt, os.numel());
  dispatch(dt, [&]<class T>() {
    auto xi = x.data<T>();
    auto o = out.span<T>();
    for (std::size_t nc = 0; nc < xi.size(); ++nc) std::fill_n(o.begin() + nc * plane, plane, xi[nc]);
  });
  Tensor res = make_result(os, std::move(out), {x}, nullptr, "expand_spatial");
  attach_backward(res, [s, dt, plane](const Buffer& gout) {
    std::vector<Buffer> grads(1);
    grads[0] = Buffer(dt, s.numel());
    dispatch(dt, [&]<class T>() {
      auto g = gout.span<T>();
      auto gx = grads[0].span<T>();
      for (std::size_t nc = 0; nc < gx.size(); ++nc) {
        T acc = 0;
        for (std::size_t p = 0; p < plane; ++p) acc += g[nc * plane + p];
        gx[nc] = acc;
      }
    });
    return grads;
  });
  return res;
}

// ---------------------------------------------------------------------------
// Normalization

Tensor layer_norm(const Tensor& x, const Tensor& gamma, const Tensor& beta, double eps) {
  if (!(eps > 0.0)) throw ValueError("layer_norm: eps must be > 0");
  const Shape s = x.shape();
  require_channel_vector(gamma, s.c, "layer_norm", "gamma");
  require_channel_vector(beta, s.c, "layer_norm", "beta");
  require_same_dtype(x, gamma, "layer_norm");
  require_same_dtype(x, beta, "layer_norm");
  const DType dt = x.dtype();
  const std::size_t plane = s.plane();
  const std::size_t per_sample = static_cast<std::size_t>(s.c) * plane;

  Buffer out(dt, s.numel());
  auto xhat = std::make_shared<Buffer>(dt, s.numel());
  auto rstd = std::make_shared<std::vector<double>>(s.n);
  dispatch(dt, [&]<class T>() {
    auto xi = x.data<T>();
    auto gm = gamma.data<T>();
    auto bt = beta.data<T>();
    auto o = out.span<T>();
    auto xh = xhat->span<T>();
    for (int n = 0; n < s.n; ++n) {
      const std::size_t base = n * per_sample;
      double mu = 0.0;
      for (std::size_t i = 0; i < per_sample; ++i) mu += xi[base + i];
      mu /= static_cast<double>(per_sample);
      double var = 0.0;
      for (std::size_t i = 0; i < per_sample; ++i) {
        const double d = xi[base + i] - mu;
        var += d * d;
      }
      var /= static_cast<double>(per_sample);
      const double r = 1.0 / std::sqrt(var + eps);
      (*rstd)[n] = r;
      for (int c = 0; c < s.c; ++c)
        for (std::size_t p = 0; p < plane; ++p) {
          const std::size_t i = base + c * plane + p;
          const T v = static_cast<T>((xi[i] - mu) * r);
          xh[i] = v;
          o[i] = gm[c] * v + bt[c];
        }
    }
  });

  Tensor res = make_result(s, std::move(out), {x, gamma, beta}, nullptr, "layer_norm");
  const bool want_x = x.requires_grad(), want_g = gamma.requires_grad(),
             want_b = beta.requires_grad();
  attach_backward(res, [s, dt, plane, per_sample, xhat, rstd, gb = gamma.shared_buffer(), want_x,
                        want_g, want_b](const Buffer& gout) {
    std::vector<Buffer> grads(3);
    dispatch(dt, [&]<class T>() {
      auto g = gout.span<T>();
      auto xh = std::as_const(*xhat).template span<T>();
      auto gm = std::as_const(*gb).template span<T>();
      if (want_g || want_b) {
        std::vector<double> dg(s.c, 0.0), db(s.c, 0.0);
        for (int n = 0; n < s.n; ++n)
          for (int c = 0; c < s.c; ++c)
            for (std::size_t p = 0; p < plane; ++p) {
              const std::size_t i = n * per_sample + c * plane + p;
              dg[c] += static_cast<double>(g[i]) * xh[i];
              db[c] += g[i];
            }
        if (want_g) {
          grads[1] = Buffer(dt, s.c);
          auto o = grads[1].span<T>();
          for (int c = 0; c < s.c; ++c) o[c] = static_cast<T>(dg[c]);
        }
        if (want_b) {
          grads[2] = Buffer(dt, s.c);
          auto o = grads[2].span<T>();
          for (int c = 0; c < s.c; ++c) o[c] = static_cast<T>(db[c]);
        }
      }
      if (want_x) {
        grads[0] = Buffer(dt, s.numel());
        auto gx = grads[0].span<T>();
        for (int n = 0; n < s.n; ++n) {
          const std::size_t base = n * per_sample;
          double m1 = 0.0, m2 = 0.0;
          for (int c = 0; c < s.c; ++c)
            for (std::size_t p = 0; p < plane; ++p) {
              const std::size_t i = base + c * plane + p;
              const double gh = static_cast<double>(g[i]) * gm[c];
              m1 += gh;
              m2 += gh * xh[i];
            }
          m1 /= static_cast<double>(per_sample);
          m2 /= static_cast<double>(per_sample);
          const double r = (*rstd)[n];
          for (int c = 0; c < s.c; ++c)
            for (std::size_t p = 0; p < plane; ++p) {
              const std::size_t i = base + c * plane + p;
              const double gh = static_cast<double>(g[i]) * gm[c];
              gx[i] = static_cast<T>(r * (gh - m1 - xh[i] * m2));
            }
        }
      }
    });
    return grads;
  });
  return res;
}

// ---------------------------------------------------------------------------
// Layout

namespace {

// Moves elements between the [N, C*r*r, H, W] and [N, C, rH, rW] layouts.
// `to_space` selects the direction.
template <class T>
void shuffle_copy(const Shape& packed, int r, const T* src, T* dst, bool to_space) {
  const int c_out = packed.c / (r * r);
  const int H = packed.h, W = packed.w;
  for (int n = 0; n < packed.n; ++n)
    for (int c = 0; c < c_out; ++c)
      for (int dy = 0; dy < r; ++dy)
        for (int dx = 0; dx < r; ++dx) {
          const int pc = c * r * r + dy * r + dx;
          for (int h = 0; h < H; ++h)
            for (int w = 0; w < W; ++w) {
              const std::size_t pi = ((static_cast<std::size_t>(n) * packed.c + pc) * H + h) * W + w;
              const std::size_t si =
                  ((static_cast<std::size_t>(n) * c_out + c) * (r * H) + (r * h + dy)) * (r * W) +
                  (r * w + dx);
              if (to_space)
                dst[si] = src[pi];
              else
                dst[pi] = src[si];
            }
        }
}

Tensor shuffle_op(const Tensor& x, int r, bool to_space) {
  if (r < 1) throw ValueError("pixel shuffle factor must be >= 1");
  const Shape s = x.shape();
  Shape packed, spatial;
  if (to_space) {
    if (s.c % (r * r) != 0)
      throw DimensionError("pixel_shuffle: " + std::to_string(s.c) +
                           " channels not divisible by r^2 = " + std::to_string(r * r));
    packed = s;
    spatial = Shape{s.n, s.c / (r * r), s.h * r, s.w * r};
  } else {
    if (s.h % r != 0 || s.w % r != 0)
      throw DimensionError("pixel_unshuffle: spatial dims " + s.str() + " not divisible by " +
                           std::to_string(r));
    spatial = s;
    packed = Shape{s.n, s.c * r * r, s.h / r, s.w / r};
  }
  const Shape os = to_space ? spatial : packed;
  const DType dt = x.dtype();
  Buffer out(dt, os.numel());
  dispatch(dt, [&]<class T>() {
    shuffle_copy<T>(packed, r, x.data<T>().data(), out.span<T>().data(), to_space);
  });
  Tensor res = make_result(os, std::move(out), {x}, nullptr,
                           to_space ? "pixel_shuffle" : "pixel_unshuffle");
  attach_backward(res, [packed, r, dt, to_space, n = s.numel()](const Buffer& gout) {
    std::vector<Buffer> grads(1);
    grads[0] = Buffer(dt, n);
    dispatch(dt, [&]<class T>() {
      shuffle_copy<T>(packed, r, gout.span<T>().data(), grads[0].span<T>().data(), !to_space);
    });
    return grads;
  });
  return res;
}

}  // namespace

Tensor pixel_shuffle(const Tensor& x, int r) { return shuffle_op(x, r, true); }
Tensor pixel_unshuffle(const Tensor& x, int r) { return shuffle_op(x, r, false); }

Tensor concat_channels(const std::vector<Tensor>& xs) {
  if (xs.empty()) throw ValueError("concat_channels: empty input list");
  const Shape s0 = xs[0].shape();
  int total = 0;
  for (const Tensor& t : xs) {
    const Shape& s = t.shape();
    if (s.n != s0.n || s.h != s0.h || s.w != s0.w)
      throw DimensionError("concat_channels: mismatched dims " + s0.str() + " vs " + s.str());
    require_same_dtype(xs[0], t, "concat_channels");
    total += s.c;
  }
  const Shape os{s0.n, total, s0.h, s0.w};
  const DType dt = xs[0].dtype();
  const std::size_t plane = s0.plane();
  Buffer out(dt, os.numel());
  std::vector<int> sizes;
  dispatch(dt, [&]<class T>() {
    auto o = out.span<T>();
    for (int n = 0; n < s0.n; ++n) {
      int c0 = 0;
      for (const Tensor& t : xs) {
        const int c = t.shape().c;
        const std::size_t len = static_cast<std::size_t>(c) * plane;
        std::copy_n(t.data<T>().begin() + n * len, len,
                    o.begin() + (static_cast<std::size_t>(n) * total + c0) * plane);
        c0 += c;
      }
    }
  });
  for (const Tensor& t : xs) sizes.push_back(t.shape().c);
  Tensor res = make_result(os, std::move(out), xs, nullptr, "concat_channels");
  std::vector<bool> want;
  for (const Tensor& t : xs) want.push_back(t.requires_grad());
  attach_backward(res, [s0, total, dt, plane, sizes, want](const Buffer& gout) {
    std::vector<Buffer> grads(sizes.size());
    dispatch(dt, [&]<class T>() {
      auto g = gout.span<T>();
      int c0 = 0;
      for (std::size_t k = 0; k < sizes.size(); ++k) {
        const std::size_t len = static_cast<std::size_t>(sizes[k]) * plane;
        if (want[k]) {
          grads[k] = Buffer(dt, len * s0.n);
          auto gk = grads[k].span<T>();
          for (int n = 0; n < s0.n; ++n)
            std::copy_n(g.begin() + (static_cast<std::size_t>(n) * total + c0) * plane, len,
                        gk.begin() + n * len);
        }
        c0 += sizes[k];
      }
    });
    return grads;
  });
  return res;
}

namespace {

// Channels [c0, c0 + count) of x as a differentiable slice.
Tensor channel_slice(const Tensor& x, int c0, int count) {
  const Shape s = x.shape();
  const Shape os{s.n, count, s.h, s.w};
  const DType dt = x.dtype();
  const std::size_t plane = s.plane();
  const std::size_t len = static_cast<std::size_t>(count) * plane;
  Buffer out(dt, os.numel());
  dispatch(dt, [&]<class T>() {
    auto xi = x.data<T>();
    auto o = out.span<T>();
    for (int n = 0; n < s.n; ++n)
      std::copy_n(xi.begin() + (static_cast<std::size_t>(n) * s.c + c0) * plane, len,
                  o.begin() + n * len);
  });
  Tensor res = make_result(os, std::move(out), {x}, nullptr, "split_channels");
  attach_backward(res, [s, dt, plane, len, c0](const Buffer& gout) {
    std::vector<Buffer> grads(1);
    grads[0] = Buffer(dt, s.numel());
    dispatch(dt, [&]<class T>() {
      auto g = gout.span<T>();
      auto gx = grads[0].span<T>();
      for (int n = 0; n < s.n; ++n)
        std::copy_n(g.begin() + n * len, len,
                    gx.begin() + (static_cast<std::size_t>(n) * s.c + c0) * plane);
    });
    return grads;
  });
  return res;
}

}  // namespace

std::vector<Tensor> split_channels(const Tensor& x, std::span<const int> sizes) {
  const int total = std::accumulate(sizes.begin(), sizes.end(), 0);
  if (total != x.shape().c)
    throw DimensionError("split_channels: sizes sum to " + std::to_string(total) + ", tensor has " +
                         std::to_string(x.shape().c) + " channels");
  std::vector<Tensor> parts;
  int c0 = 0;
  for (int sz : sizes) {
    if (sz < 1) throw DimensionError("split_channels: every part needs >= 1 channel");
    parts.push_back(channel_slice(x, c0, sz));
    c0 += sz;
  }
  return parts;
}

Tensor crop(const Tensor& x, int top, int left, int h, int w) {
  const Shape s = x.shape();
  if (top < 0 || left < 0 || h < 1 || w < 1 || top + h > s.h || left + w > s.w)
    throw DimensionError("crop window out of range for " + s.str());
  const Shape os{s.n, s.c, h, w};
  const DType dt = x.dtype();
  Buffer out(dt, os.numel());
  dispatch(dt, [&]<class T>() {
    auto xi = x.data<T>();
    auto o = out.span<T>();
    for (int n = 0; n < s.n; ++n)
      for (int c = 0; c < s.c; ++c)
        for (int y = 0; y < h; ++y)
          std::copy_n(xi.begin() + index4(s, n, c, top + y, left), w,
                      o.begin() + index4(os, n, c, y, 0));
  });
  Tensor res = make_result(os, std::move(out), {x}, nullptr, "crop");
  attach_backward(res, [s, os, dt, top, left](const Buffer& gout) {
    std::vector<Buffer> grads(1);
    grads[0] = Buffer(dt, s.numel());
    dispatch(dt, [&]<class T>() {
      auto g = gout.span<T>();
      auto gx = grads[0].span<T>();
      for (int n = 0; n < s.n; ++n)
        for (int c = 0; c < s.c; ++c)
          for (int y = 0; y < os.h; ++y)
            std::copy_n(g.begin() + index4(os, n, c, y, 0), os.w,
                        gx.begin() + index4(s, n, c, top + y, left));
    });
    return grads;
  });
  return res;
}

// ---------------------------------------------------------------------------
// Resampling

namespace {

struct LinearTap {
  int i0, i1;
  double frac;
};

// Half-pixel source coordinate, clamped below at 0 and above at n-1.
std::vector<LinearTap> linear_taps(int in, int out, double scale) {
  std::vector<LinearTap> taps(out);
  for (int o = 0; o < out; ++o) {
    double src = (o + 0.5) / scale - 0.5;
    if (src < 0.0) src = 0.0;
    int i0 = static_cast<int>(std::floor(src));
    if (i0 > in - 1) i0 = in - 1;
    const int i1 = std::min(i0 + 1, in - 1);
    const double frac = (i0 == in - 1) ? 0.0 : src - i0;
    taps[o] = {i0, i1, frac};
  }
  return taps;
}

}  // namespace

Tensor bilinear_resize(const Tensor& x, double scale_factor) {
  if (!(scale_factor > 0.0)) throw ValueError("bilinear_resize: scale must be > 0");
  const Shape s = x.shape();
  const int ho = static_cast<int>(std::lround(s.h * scale_factor));
  const int wo = static_cast<int>(std::lround(s.w * scale_factor));
  if (ho < 1 || wo < 1) throw DimensionError("bilinear_resize: output would be empty");
  const Shape os{s.n, s.c, ho, wo};
  const auto ty = linear_taps(s.h, ho, scale_factor);
  const auto tx = linear_taps(s.w, wo, scale_factor);
  const DType dt = x.dtype();
  Buffer out(dt, os.numel());
  dispatch(dt, [&]<class T>() {
    auto xi = x.data<T>();
    auto o = out.span<T>();
    for (int nc = 0; nc < s.n * s.c; ++nc) {
      const T* plane = xi.data() + static_cast<std::size_t>(nc) * s.h * s.w;
      T* op = o.data() + static_cast<std::size_t>(nc) * ho * wo;
      for (int y = 0; y < ho; ++y) {
        const auto& a = ty[y];
        const T* r0 = plane + static_cast<std::size_t>(a.i0) * s.w;
        const T* r1 = plane + static_cast<std::size_t>(a.i1) * s.w;
        for (int xo = 0; xo < wo; ++xo) {
          const auto& b = tx[xo];
          const double top = r0[b.i0] + (r0[b.i1] - r0[b.i0]) * b.frac;
          const double bot = r1[b.i0] + (r1[b.i1] - r1[b.i0]) * b.frac;
          op[static_cast<std::size_t>(y) * wo + xo] = static_cast<T>(top + (bot - top) * a.frac);
        }
      }
    }
  });
  Tensor res = make_result(os, std::move(out), {x}, nullptr, "bilinear_resize");
  attach_backward(res, [s, ho, wo, ty, tx, dt](const Buffer& gout) {
    std::vector<Buffer> grads(1);
    grads[0] = Buffer(dt, s.numel());
    dispatch(dt, [&]<class T>() {
      auto g = gout.span<T>();
      auto gx = grads[0].span<T>();
      for (int nc = 0; nc < s.n * s.c; ++nc) {
        T* plane = gx.data() + static_cast<std::size_t>(nc) * s.h * s.w;
        const T* gp = g.data() + static_cast<std::size_t>(nc) * ho * wo;
        for (int y = 0; y < ho; ++y) {
          const auto& a = ty[y];
          for (int xo = 0; xo < wo; ++xo) {
            const auto& b = tx[xo];
            const double v = gp[static_cast<std::size_t>(y) * wo + xo];
            plane[a.i0 * s.w + b.i0] += static_cast<T>(v * (1 - a.frac) * (1 - b.frac));
            plane[a.i0 * s.w + b.i1] += static_cast<T>(v * (1 - a.frac) * b.frac);
            plane[a.i1 * s.w + b.i0] += static_cast<T>(v * a.frac * (1 - b.frac));
            plane[a.i1 * s.w + b.i1] += static_cast<T>(v * a.frac * b.frac);
          }
        }
      }
    });
    return grads;
  });
  return res;
}

}  // namespace ctun
