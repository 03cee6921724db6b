#pragma once

// Feature-map primitives shared by the generator and discriminator, each with
// its hand-written backward. Maps are [C, H, W]; "pointwise" layers act on the
// channel vector at every spatial position (a 1x1 convolution).

#include <cmath>
#include <cstddef>

#include "membank/error.hpp"
#include "membank/rng.hpp"
#include "membank/tensor.hpp"

namespace membank::nn {

inline constexpr double kLeakySlope = 0.2;

inline std::size_t plane(const Tensor& x) { return x.dim(1) * x.dim(2); }

// out[o, p] = sum_i w[o, i] x[i, p] + b[o]. Pass an empty bias to skip it.
inline Tensor pointwise(const Tensor& x, const Tensor& w, const Tensor& b) {
  const std::size_t cin = x.dim(0), cout = w.dim(0), hw = plane(x);
  if (w.dim(1) != cin) {
    throw ShapeError("pointwise weight " + shape_str(w.shape()) + " does not accept " + shape_str(x.shape()));
  }
  Tensor out({cout, x.dim(1), x.dim(2)});
  for (std::size_t o = 0; o < cout; ++o) {
    double* dst = out.data().data() + o * hw;
    const double bias = b.empty() ? 0.0 : b[o];
    for (std::size_t p = 0; p < hw; ++p) dst[p] = bias;
    for (std::size_t i = 0; i < cin; ++i) {
      const double wi = w[o * cin + i];
      const double* src = x.data().data() + i * hw;
      for (std::size_t p = 0; p < hw; ++p) dst[p] += wi * src[p];
    }
  }
  return out;
}

// Accumulates dW (and db when non-empty) and returns dx.
inline Tensor pointwise_backward(const Tensor& x, const Tensor& w, const Tensor& dout, Tensor& dw, Tensor* db) {
  const std::size_t cin = x.dim(0), cout = w.dim(0), hw = plane(x);
  Tensor dx(x.shape());
  for (std::size_t o = 0; o < cout; ++o) {
    const double* g = dout.data().data() + o * hw;
    if (db) {
      double acc = 0.0;
      for (std::size_t p = 0; p < hw; ++p) acc += g[p];
      (*db)[o] += acc;
    }
    for (std::size_t i = 0; i < cin; ++i) {
      const double* src = x.data().data() + i * hw;
      double* dsrc = dx.data().data() + i * hw;
      const double wi = w[o * cin + i];
      double acc = 0.0;
      for (std::size_t p = 0; p < hw; ++p) {
        acc += g[p] * src[p];
        dsrc[p] += wi * g[p];
      }
      dw[o * cin + i] += acc;
    }
  }
  return dx;
}

// dw[o, i] += sum_p a[o, p] b[i, p]
inline void accumulate_outer(const Tensor& a, const Tensor& b, Tensor& dw) {
  const std::size_t cout = a.dim(0), cin = b.dim(0), hw = plane(a);
  for (std::size_t o = 0; o < cout; ++o) {
    const double* pa = a.data().data() + o * hw;
    for (std::size_t i = 0; i < cin; ++i) {
      const double* pb = b.data().data() + i * hw;
      double acc = 0.0;
      for (std::size_t p = 0; p < hw; ++p) acc += pa[p] * pb[p];
      dw[o * cin + i] += acc;
    }
  }
}

inline double leaky(double z) { return z > 0.0 ? z : kLeakySlope * z; }

// Subgradient at exactly 0 is the negative-side slope.
inline double leaky_slope(double z) { return z > 0.0 ? 1.0 : kLeakySlope; }

inline Tensor leaky_relu(const Tensor& z) {
  Tensor out = z;
  for (auto& v : out.values()) v = leaky(v);
  return out;
}

// dz = dy * slope(z)
inline Tensor leaky_relu_backward(const Tensor& z, const Tensor& dy) {
  Tensor dz = dy;
  for (std::size_t i = 0; i < dz.size(); ++i) dz[i] *= leaky_slope(z[i]);
  return dz;
}

inline Tensor upsample2(const Tensor& x) {
  const std::size_t c = x.dim(0), h = x.dim(1), w = x.dim(2);
  Tensor out({c, 2 * h, 2 * w});
  for (std::size_t ch = 0; ch < c; ++ch)
    for (std::size_t y = 0; y < 2 * h; ++y)
      for (std::size_t xx = 0; xx < 2 * w; ++xx) out.at(ch, y, xx) = x.at(ch, y / 2, xx / 2);
  return out;
}

inline Tensor upsample2_backward(const Tensor& dy) {
  const std::size_t c = dy.dim(0), h = dy.dim(1) / 2, w = dy.dim(2) / 2;
  Tensor dx({c, h, w});
  for (std::size_t ch = 0; ch < c; ++ch)
    for (std::size_t y = 0; y < 2 * h; ++y)
      for (std::size_t xx = 0; xx < 2 * w; ++xx) dx.at(ch, y / 2, xx / 2) += dy.at(ch, y, xx);
  return dx;
}

inline Tensor avgpool2(const Tensor& x) { return pool2d(x, PoolKind::average, 2, 2); }

inline Tensor avgpool2_backward(const Tensor& dy) {
  const std::size_t c = dy.dim(0), h = dy.dim(1), w = dy.dim(2);
  Tensor dx({c, 2 * h, 2 * w});
  for (std::size_t ch = 0; ch < c; ++ch)
    for (std::size_t y = 0; y < 2 * h; ++y)
      for (std::size_t xx = 0; xx < 2 * w; ++xx) dx.at(ch, y, xx) = 0.25 * dy.at(ch, y / 2, xx / 2);
  return dx;
}

// Nearest-neighbour resampling to (h, w): source row = floor(y * H / h).
inline Tensor resample_nearest(const Tensor& x, std::size_t h, std::size_t w) {
  const std::size_t c = x.dim(0), sh = x.dim(1), sw = x.dim(2);
  Tensor out({c, h, w});
  for (std::size_t ch = 0; ch < c; ++ch)
    for (std::size_t y = 0; y < h; ++y)
      for (std::size_t xx = 0; xx < w; ++xx) out.at(ch, y, xx) = x.at(ch, y * sh / h, xx * sw / w);
  return out;
}

inline Tensor resample_nearest_backward(const Tensor& dy, std::size_t sh, std::size_t sw) {
  const std::size_t c = dy.dim(0), h = dy.dim(1), w = dy.dim(2);
  Tensor dx({c, sh, sw});
  for (std::size_t ch = 0; ch < c; ++ch)
    for (std::size_t y = 0; y < h; ++y)
      for (std::size_t xx = 0; xx < w; ++xx) dx.at(ch, y * sh / h, xx * sw / w) += dy.at(ch, y, xx);
  return dx;
}

inline Tensor concat_channels(const Tensor& a, const Tensor& b) {
  if (a.dim(1) != b.dim(1) || a.dim(2) != b.dim(2)) {
    throw ShapeError("cannot concatenate " + shape_str(a.shape()) + " and " + shape_str(b.shape()));
  }
  Tensor out({a.dim(0) + b.dim(0), a.dim(1), a.dim(2)});
  std::copy(a.values().begin(), a.values().end(), out.values().begin());
  std::copy(b.values().begin(), b.values().end(), out.values().begin() + static_cast<std::ptrdiff_t>(a.size()));
  return out;
}

// First `channels` channels of x.
inline Tensor leading_channels(const Tensor& x, std::size_t channels) {
  const std::size_t hw = plane(x);
  Tensor out({channels, x.dim(1), x.dim(2)});
  std::copy_n(x.values().begin(), channels * hw, out.values().begin());
  return out;
}

inline Tensor trailing_channels(const Tensor& x, std::size_t from) {
  const std::size_t hw = plane(x);
  Tensor out({x.dim(0) - from, x.dim(1), x.dim(2)});
  std::copy(x.values().begin() + static_cast<std::ptrdiff_t>(from * hw), x.values().end(), out.values().begin());
  return out;
}

// A D-vector repeated over an h x w grid.
inline Tensor broadcast_spatial(const Tensor& vec, std::size_t h, std::size_t w) {
  Tensor out({vec.size(), h, w});
  for (std::size_t c = 0; c < vec.size(); ++c)
    for (std::size_t p = 0; p < h * w; ++p) out[c * h * w + p] = vec[c];
  return out;
}

inline void add_into(Tensor& dst, const Tensor& src) {
  for (std::size_t i = 0; i < dst.size(); ++i) dst[i] += src[i];
}

inline Tensor zeros_like(const Tensor& t) { return Tensor(t.shape()); }

// Gaussian init scaled by 1/sqrt(fan_in).
inline Tensor init_weight(std::size_t out, std::size_t in, SeqRng& rng, double gain = 1.0) {
  Tensor w({out, in});
  const double scale = gain / std::sqrt(static_cast<double>(in));
  for (auto& v : w.values()) v = scale * rng.normal();
  return w;
}

}  // namespace membank::nn
