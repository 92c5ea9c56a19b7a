#include "oracles.hpp"

#include <algorithm>
#include <cmath>
#include <numbers>

namespace oracle {

Image from_tensor(const ctun::Tensor& t) {
  const auto& s = t.shape();
  return Image{s.n, s.c, s.h, s.w, t.to_vector()};
}

ctun::Tensor to_tensor(const Image& img, ctun::DType dt) {
  return ctun::Tensor::from_values(ctun::Shape{img.n, img.c, img.h, img.w}, img.v, dt);
}

Image conv2d(const Image& x, const Image& weight, const std::vector<double>& bias, int stride,
             int pad) {
  const int cout = weight.n, kh = weight.h, kw = weight.w;
  const int ho = (x.h + 2 * pad - kh) / stride + 1;
  const int wo = (x.w + 2 * pad - kw) / stride + 1;
  Image out{x.n, cout, ho, wo, std::vector<double>(static_cast<std::size_t>(x.n) * cout * ho * wo)};
  for (int n = 0; n < x.n; ++n)
    for (int co = 0; co < cout; ++co)
      for (int oy = 0; oy < ho; ++oy)
        for (int ox = 0; ox < wo; ++ox) {
          double acc = bias.empty() ? 0.0 : bias[co];
          for (int ci = 0; ci < x.c; ++ci)
            for (int ky = 0; ky < kh; ++ky)
              for (int kx = 0; kx < kw; ++kx) {
                const int iy = oy * stride + ky - pad;
                const int ix = ox * stride + kx - pad;
                if (iy < 0 || iy >= x.h || ix < 0 || ix >= x.w) continue;
                acc += weight.at(co, ci, ky, kx) * x.at(n, ci, iy, ix);
              }
          out.at(n, co, oy, ox) = acc;
        }
  return out;
}

Image bilinear(const Image& x, double scale) {
  const int ho = static_cast<int>(std::lround(x.h * scale));
  const int wo = static_cast<int>(std::lround(x.w * scale));
  Image out{x.n, x.c, ho, wo, std::vector<double>(static_cast<std::size_t>(x.n) * x.c * ho * wo)};
  auto coord = [&](int o, int n_in) {
    const double s = std::clamp((o + 0.5) / scale - 0.5, 0.0, static_cast<double>(n_in - 1));
    return s;
  };
  for (int n = 0; n < x.n; ++n)
    for (int c = 0; c < x.c; ++c)
      for (int oy = 0; oy < ho; ++oy)
        for (int ox = 0; ox < wo; ++ox) {
          const double sy = coord(oy, x.h), sx = coord(ox, x.w);
          const int y0 = static_cast<int>(sy), x0 = static_cast<int>(sx);
          const int y1 = std::min(y0 + 1, x.h - 1), x1 = std::min(x0 + 1, x.w - 1);
          const double fy = sy - y0, fx = sx - x0;
          out.at(n, c, oy, ox) = (1 - fy) * (1 - fx) * x.at(n, c, y0, x0) +
                                 (1 - fy) * fx * x.at(n, c, y0, x1) +
                                 fy * (1 - fx) * x.at(n, c, y1, x0) + fy * fx * x.at(n, c, y1, x1);
        }
  return out;
}

namespace {

double cubic(double t) {
  const double a = -0.5;
  const double u = std::abs(t);
  if (u <= 1.0) return (a + 2) * u * u * u - (a + 3) * u * u + 1;
  if (u < 2.0) return a * u * u * u - 5 * a * u * u + 8 * a * u - 4 * a;
  return 0.0;
}

struct Taps {
  std::vector<int> idx;
  std::vector<double> wt;
};

Taps taps_for(int o, int n_in, double scale, bool antialias) {
  const bool widen = antialias && scale < 1.0;
  const double support = widen ? 2.0 / scale : 2.0;
  const double src = (o + 0.5) / scale - 0.5;
  Taps t;
  for (int i = static_cast<int>(std::floor(src - support)); i <= static_cast<int>(std::ceil(src + support)); ++i) {
    const double d = src - i;
    const double k = widen ? scale * cubic(scale * d) : cubic(d);
    if (k == 0.0) continue;
    t.idx.push_back(std::clamp(i, 0, n_in - 1));
    t.wt.push_back(k);
  }
  return t;
}

}  // namespace

Image bicubic(const Image& x, double scale, bool antialias) {
  const int ho = static_cast<int>(std::ceil(x.h * scale - 1e-9));
  const int wo = static_cast<int>(std::ceil(x.w * scale - 1e-9));
  Image out{x.n, x.c, ho, wo, std::vector<double>(static_cast<std::size_t>(x.n) * x.c * ho * wo)};
  for (int n = 0; n < x.n; ++n)
    for (int c = 0; c < x.c; ++c)
      for (int oy = 0; oy < ho; ++oy)
        for (int ox = 0; ox < wo; ++ox) {
          const Taps ty = taps_for(oy, x.h, scale, antialias);
          const Taps tx = taps_for(ox, x.w, scale, antialias);
          double num = 0.0, den = 0.0;
          for (std::size_t a = 0; a < ty.idx.size(); ++a)
            for (std::size_t b = 0; b < tx.idx.size(); ++b) {
              const double wgt = ty.wt[a] * tx.wt[b];
              num += wgt * x.at(n, c, ty.idx[a], tx.idx[b]);
              den += wgt;
            }
          out.at(n, c, oy, ox) = num / den;
        }
  return out;
}

namespace {

int reflect(int i, int n) {
  if (n == 1) return 0;
  const int period = 2 * (n - 1);
  i %= period;
  if (i < 0) i += period;
  return i < n ? i : period - i;
}

}  // namespace

Image gaussian(const Image& x, double sigma, int radius) {
  Image out = x;
  for (int n = 0; n < x.n; ++n)
    for (int c = 0; c < x.c; ++c)
      for (int y = 0; y < x.h; ++y)
        for (int xx = 0; xx < x.w; ++xx) {
          double num = 0.0, den = 0.0;
          for (int dy = -radius; dy <= radius; ++dy)
            for (int dx = -radius; dx <= radius; ++dx) {
              const double wgt = std::exp(-(dy * dy + dx * dx) / (2 * sigma * sigma));
              num += wgt * x.at(n, c, reflect(y + dy, x.h), reflect(xx + dx, x.w));
              den += wgt;
            }
          out.at(n, c, y, xx) = num / den;
        }
  return out;
}

double psnr(const std::vector<double>& a, const std::vector<double>& b, double peak) {
  double se = 0.0;
  for (std::size_t i = 0; i < a.size(); ++i) se += (a[i] - b[i]) * (a[i] - b[i]);
  const double mse = se / static_cast<double>(a.size());
  if (mse == 0.0) return 99.0;
  return 10.0 * std::log10(peak * peak / mse);
}

double ssim(const std::vector<double>& a, const std::vector<double>& b, int h, int w) {
  const double c1 = (0.01 * 255) * (0.01 * 255);
  const double c2 = (0.03 * 255) * (0.03 * 255);
  double win[11][11];
  double total = 0.0;
  for (int y = 0; y < 11; ++y)
    for (int x = 0; x < 11; ++x) {
      win[y][x] = std::exp(-((y - 5) * (y - 5) + (x - 5) * (x - 5)) / (2 * 1.5 * 1.5));
      total += win[y][x];
    }
  for (auto& row : win)
    for (double& v : row) v /= total;
  double acc = 0.0;
  int count = 0;
  for (int y0 = 0; y0 + 11 <= h; ++y0)
    for (int x0 = 0; x0 + 11 <= w; ++x0) {
      double ma = 0, mb = 0, saa = 0, sbb = 0, sab = 0;
      for (int y = 0; y < 11; ++y)
        for (int x = 0; x < 11; ++x) {
          const double va = a[(y0 + y) * w + x0 + x];
          const double vb = b[(y0 + y) * w + x0 + x];
          ma += win[y][x] * va;
          mb += win[y][x] * vb;
          saa += win[y][x] * va * va;
          sbb += win[y][x] * vb * vb;
          sab += win[y][x] * va * vb;
        }
      const double va = saa - ma * ma, vb = sbb - mb * mb, cov = sab - ma * mb;
      acc += ((2 * ma * mb + c1) * (2 * cov + c2)) / ((ma * ma + mb * mb + c1) * (va + vb + c2));
      ++count;
    }
  return acc / count;
}

std::vector<std::complex<double>> dft2(const std::vector<double>& x, int h, int w) {
  std::vector<std::complex<double>> out(static_cast<std::size_t>(h) * w);
  for (int k = 0; k < h; ++k)
    for (int l = 0; l < w; ++l) {
      std::complex<double> acc = 0.0;
      for (int m = 0; m < h; ++m)
        for (int n = 0; n < w; ++n) {
          const double ang = -2.0 * std::numbers::pi * (static_cast<double>(k) * m / h +
                                                        static_cast<double>(l) * n / w);
          acc += x[m * w + n] * std::complex<double>(std::cos(ang), std::sin(ang));
        }
      out[k * w + l] = acc;
    }
  return out;
}

}  // namespace oracle
