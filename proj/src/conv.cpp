#include <algorithm>
#include <cstring>

#include "ctun/alloc_meter.hpp"
#include "ctun/ops.hpp"
#include "gemm.hpp"
#include "op_helpers.hpp"

namespace ctun {

namespace {

struct ConvGeom {
  int n, cin, h, w;
  int cout, kh, kw;
  int stride, pad;
  int ho, wo;

  int k() const { return cin * kh * kw; }
  int p() const { return ho * wo; }
  bool direct() const { return kh == 1 && kw == 1 && stride == 1 && pad == 0; }
  bool transposable() const { return !direct() && stride == 1 && kh == kw && pad < kh; }
  // Geometry of the input-gradient correlation over the output gradient.
  ConvGeom transposed() const {
    return ConvGeom{n, cout, ho, wo, cin, kh, kw, 1, kh - 1 - pad, h, w};
  }
};

// col[(c*kh + ky)*kw + kx, oy*wo + ox] = x[c, oy*stride - pad + ky, ox*stride - pad + kx]
template <class T>
void im2col(const ConvGeom& g, const T* x, T* col) {
  const std::size_t p = static_cast<std::size_t>(g.p());
  for (int c = 0; c < g.cin; ++c)
    for (int ky = 0; ky < g.kh; ++ky)
      for (int kx = 0; kx < g.kw; ++kx) {
        T* row = col + ((static_cast<std::size_t>(c) * g.kh + ky) * g.kw + kx) * p;
        const T* plane = x + static_cast<std::size_t>(c) * g.h * g.w;
        for (int oy = 0; oy < g.ho; ++oy) {
          T* dst = row + static_cast<std::size_t>(oy) * g.wo;
          const int iy = oy * g.stride - g.pad + ky;
          if (iy < 0 || iy >= g.h) {
            std::fill(dst, dst + g.wo, T(0));
            continue;
          }
          const T* src = plane + static_cast<std::size_t>(iy) * g.w;
          if (g.stride == 1) {
            const int lo = std::clamp(g.pad - kx, 0, g.wo);
            const int hi = std::clamp(g.w + g.pad - kx, lo, g.wo);
            std::fill(dst, dst + lo, T(0));
            std::memcpy(dst + lo, src + lo - g.pad + kx, sizeof(T) * (hi - lo));
            std::fill(dst + hi, dst + g.wo, T(0));
            continue;
          }
          for (int ox = 0; ox < g.wo; ++ox) {
            const int ix = ox * g.stride - g.pad + kx;
            dst[ox] = (ix < 0 || ix >= g.w) ? T(0) : src[ix];
          }
        }
      }
}

// Adjoint of im2col: scatters column gradients back onto the input plane.
template <class T>
void col2im(const ConvGeom& g, const T* col, T* gx) {
  const std::size_t p = static_cast<std::size_t>(g.p());
  for (int c = 0; c < g.cin; ++c)
    for (int ky = 0; ky < g.kh; ++ky)
      for (int kx = 0; kx < g.kw; ++kx) {
        const T* row = col + ((static_cast<std::size_t>(c) * g.kh + ky) * g.kw + kx) * p;
        T* plane = gx + static_cast<std::size_t>(c) * g.h * g.w;
        for (int oy = 0; oy < g.ho; ++oy) {
          const int iy = oy * g.stride - g.pad + ky;
          if (iy < 0 || iy >= g.h) continue;
          const T* src = row + static_cast<std::size_t>(oy) * g.wo;
          T* dst = plane + static_cast<std::size_t>(iy) * g.w;
          for (int ox = 0; ox < g.wo; ++ox) {
            const int ix = ox * g.stride - g.pad + kx;
            if (ix >= 0 && ix < g.w) dst[ix] += src[ox];
          }
        }
      }
}

ConvGeom make_geom(const Tensor& x, const Tensor& w, const Tensor& b, int stride, int pad) {
  const Shape& xs = x.shape();
  const Shape& ws = w.shape();
  detail::require_same_dtype(x, w, "conv2d");
  if (b.defined()) {
    detail::require_same_dtype(x, b, "conv2d");
    if (b.numel() != static_cast<std::size_t>(ws.n))
      throw DimensionError("conv2d: bias has " + std::to_string(b.numel()) +
                           " values for " + std::to_string(ws.n) + " output channels");
  }
  if (ws.c != xs.c)
    throw DimensionError("conv2d: weight expects " + std::to_string(ws.c) +
                         " input channels, input has " + std::to_string(xs.c));
  if (ws.h % 2 == 0 || ws.w % 2 == 0)
    throw DimensionError("conv2d: kernel sides must be odd, got " + ws.str());
  if (stride < 1) throw ValueError("conv2d: stride must be >= 1");
  if (pad < 0) throw ValueError("conv2d: pad must be >= 0");
  const int span_h = xs.h + 2 * pad - ws.h;
  const int span_w = xs.w + 2 * pad - ws.w;
  if (span_h < 0 || span_w < 0)
    throw DimensionError("conv2d: kernel " + ws.str() + " larger than padded input " + xs.str());
  if (span_h % stride != 0 || span_w % stride != 0)
    throw DimensionError("conv2d: stride " + std::to_string(stride) +
                         " does not divide the padded extent exactly");
  return ConvGeom{xs.n, xs.c, xs.h, xs.w, ws.n, ws.h, ws.w, stride, pad,
                  span_h / stride + 1, span_w / stride + 1};
}

}  // namespace

Tensor conv2d(const Tensor& x, const Tensor& w, const Tensor& b, int stride, int pad) {
  const ConvGeom g = make_geom(x, w, b, stride, pad);
  const Shape out_shape{g.n, g.cout, g.ho, g.wo};
  const DType dt = x.dtype();
  Buffer out(dt, out_shape.numel());
  MacCounter::global().add(static_cast<std::uint64_t>(g.n) * g.cout * g.k() * g.p());

  dispatch(dt, [&]<class T>() {
    const T* xd = x.data<T>().data();
    const T* wd = w.data<T>().data();
    T* od = out.span<T>().data();
    const std::size_t in_stride = static_cast<std::size_t>(g.cin) * g.h * g.w;
    const std::size_t out_stride = static_cast<std::size_t>(g.cout) * g.p();
    std::vector<T> col(g.direct() ? 0 : static_cast<std::size_t>(g.k()) * g.p());
    for (int n = 0; n < g.n; ++n) {
      T* on = od + n * out_stride;
      if (b.defined()) {
        const T* bd = b.data<T>().data();
        for (int co = 0; co < g.cout; ++co)
          std::fill(on + static_cast<std::size_t>(co) * g.p(),
                    on + static_cast<std::size_t>(co + 1) * g.p(), bd[co]);
      }
      const T* src = xd + n * in_stride;
      if (!g.direct()) {
        im2col(g, src, col.data());
        src = col.data();
      }
      detail::gemm_nn<T>(g.cout, g.p(), g.k(), wd, g.k(), src, g.p(), on, g.p());
    }
  });

  Tensor result = make_result(out_shape, std::move(out), {x, w, b}, nullptr, "conv2d");
  const bool want_x = x.requires_grad(), want_w = w.requires_grad();
  const bool want_b = b.defined() && b.requires_grad();
  detail::attach_backward(result, [g, dt, xb = x.shared_buffer(), wb = w.shared_buffer(), want_x,
                                   want_w, want_b](const Buffer& gout) {
    std::vector<Buffer> grads(3);
    dispatch(dt, [&]<class T>() {
      const T* xd = std::as_const(*xb).template span<T>().data();
      const T* wd = std::as_const(*wb).template span<T>().data();
      const T* gd = gout.span<T>().data();
      const int k = g.k(), p = g.p();
      const std::size_t in_stride = static_cast<std::size_t>(g.cin) * g.h * g.w;
      const std::size_t out_stride = static_cast<std::size_t>(g.cout) * p;
      if (want_w) {
        grads[1] = Buffer(dt, static_cast<std::size_t>(g.cout) * k);
        T* gw = grads[1].span<T>().data();
        std::vector<T> col(g.direct() ? 0 : static_cast<std::size_t>(k) * p);
        for (int n = 0; n < g.n; ++n) {
          const T* src = xd + n * in_stride;
          if (!g.direct()) {
            im2col(g, src, col.data());
            src = col.data();
          }
          detail::gemm_nt<T>(g.cout, k, p, gd + n * out_stride, p, src, p, gw, k);
        }
      }
      if (want_x) {
        grads[0] = Buffer(dt, static_cast<std::size_t>(g.n) * in_stride);
        T* gx = grads[0].span<T>().data();
        if (g.transposable()) {
          // Stride-1 input gradient: full correlation of the output gradient
          // with the spatially flipped, channel-transposed kernel.
          const ConvGeom t = g.transposed();
          std::vector<T> w_f(static_cast<std::size_t>(g.cin) * g.cout * g.kh * g.kw);
          for (int co = 0; co < g.cout; ++co)
            for (int ci = 0; ci < g.cin; ++ci)
              for (int ky = 0; ky < g.kh; ++ky)
                for (int kx = 0; kx < g.kw; ++kx)
                  w_f[((static_cast<std::size_t>(ci) * g.cout + co) * g.kh + ky) * g.kw + kx] =
                      wd[((static_cast<std::size_t>(co) * g.cin + ci) * g.kh + (g.kh - 1 - ky)) *
                             g.kw + (g.kw - 1 - kx)];
          std::vector<T> col(static_cast<std::size_t>(t.k()) * t.p());
          for (int n = 0; n < g.n; ++n) {
            im2col(t, gd + n * out_stride, col.data());
            detail::gemm_nn<T>(t.cout, t.p(), t.k(), w_f.data(), t.k(), col.data(), t.p(),
                               gx + n * in_stride, t.p());
          }
        } else {
          std::vector<T> w_t(static_cast<std::size_t>(k) * g.cout);
          detail::transpose(g.cout, k, wd, w_t.data());
          std::vector<T> gcol(g.direct() ? 0 : static_cast<std::size_t>(k) * p);
          for (int n = 0; n < g.n; ++n) {
            if (g.direct()) {
              detail::gemm_nn<T>(k, p, g.cout, w_t.data(), g.cout, gd + n * out_stride, p,
                                 gx + n * in_stride, p);
            } else {
              std::fill(gcol.begin(), gcol.end(), T(0));
              detail::gemm_nn<T>(k, p, g.cout, w_t.data(), g.cout, gd + n * out_stride, p,
                                 gcol.data(), p);
              col2im(g, gcol.data(), gx + n * in_stride);
            }
          }
        }
      }
      if (want_b) {
        grads[2] = Buffer(dt, static_cast<std::size_t>(g.cout));
        T* gb = grads[2].span<T>().data();
        for (int n = 0; n < g.n; ++n)
          for (int co = 0; co < g.cout; ++co) {
            const T* row = gd + n * out_stride + static_cast<std::size_t>(co) * p;
            T acc = 0;
            for (int i = 0; i < p; ++i) acc += row[i];
            gb[co] += acc;
          }
      }
    });
    return grads;
  });
  return result;
}

Tensor conv1x1(const Tensor& x, const Tensor& w, const Tensor& b) {
  if (w.shape().h != 1 || w.shape().w != 1)
    throw DimensionError("conv1x1: weight must be [Cout, Cin, 1, 1], got " + w.shape().str());
  return conv2d(x, w, b, 1, 0);
}

}  // namespace ctun
