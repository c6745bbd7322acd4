#pragma once

// Naive double-precision reference implementations used as oracles for the
// network-level tests. Deliberately loop-by-loop and unoptimised.

#include <cmath>
#include <vector>

#include "otfpf/tensor.hpp"

namespace otfpf::reference {

using Vol = BasicTensor<double>;

inline double at(const Vol& v, std::ptrdiff_t d, std::ptrdiff_t w, std::ptrdiff_t h,
                 std::size_t c) {
  const auto& s = v.shape();
  if (d < 0 || w < 0 || h < 0 || d >= std::ptrdiff_t(s[0]) || w >= std::ptrdiff_t(s[1]) ||
      h >= std::ptrdiff_t(s[2])) {
    return 0.0;
  }
  return v[((std::size_t(d) * s[1] + std::size_t(w)) * s[2] + std::size_t(h)) * s[3] + c];
}

inline double& ref(Vol& v, std::size_t d, std::size_t w, std::size_t h, std::size_t c) {
  const auto& s = v.shape();
  return v[((d * s[1] + w) * s[2] + h) * s[3] + c];
}

/// Dense convolution, weight [k,k,k,cin,cout], optional bias [cout].
inline Vol conv(const Vol& x, const Vol& w, const Vol* b, std::size_t stride, std::size_t pad) {
  const auto k = w.extent(0), cin = w.extent(3), cout = w.extent(4);
  auto ext = [&](std::size_t n) { return (n + 2 * pad - k) / stride + 1; };
  Vol y({ext(x.extent(0)), ext(x.extent(1)), ext(x.extent(2)), cout});
  for (std::size_t d = 0; d < y.extent(0); ++d)
    for (std::size_t ww = 0; ww < y.extent(1); ++ww)
      for (std::size_t h = 0; h < y.extent(2); ++h)
        for (std::size_t co = 0; co < cout; ++co) {
          double s = b ? (*b)[co] : 0.0;
          for (std::size_t a = 0; a < k; ++a)
            for (std::size_t bb = 0; bb < k; ++bb)
              for (std::size_t c = 0; c < k; ++c)
                for (std::size_t ci = 0; ci < cin; ++ci) {
                  const double xv = at(x, std::ptrdiff_t(d * stride + a) - std::ptrdiff_t(pad),
                                       std::ptrdiff_t(ww * stride + bb) - std::ptrdiff_t(pad),
                                       std::ptrdiff_t(h * stride + c) - std::ptrdiff_t(pad), ci);
                  s += xv * w[(((a * k + bb) * k + c) * cin + ci) * cout + co];
                }
          ref(y, d, ww, h, co) = s;
        }
  return y;
}

/// Depthwise convolution, weight [k,k,k,1,C], stride 1, same padding.
inline Vol depthwise(const Vol& x, const Vol& w, const Vol& b) {
  const auto k = w.extent(0), cn = x.extent(3);
  const auto pad = std::ptrdiff_t(k / 2);
  Vol y(x.shape());
  for (std::size_t d = 0; d < x.extent(0); ++d)
    for (std::size_t ww = 0; ww < x.extent(1); ++ww)
      for (std::size_t h = 0; h < x.extent(2); ++h)
        for (std::size_t c = 0; c < cn; ++c) {
          double s = b[c];
          for (std::size_t a = 0; a < k; ++a)
            for (std::size_t bb = 0; bb < k; ++bb)
              for (std::size_t e = 0; e < k; ++e)
                s += at(x, std::ptrdiff_t(d + a) - pad, std::ptrdiff_t(ww + bb) - pad,
                        std::ptrdiff_t(h + e) - pad, c) *
                     w[((a * k + bb) * k + e) * cn + c];
          ref(y, d, ww, h, c) = s;
        }
  return y;
}

/// Per-voxel normalisation over the last axis (any rank).
inline Vol layer_norm(const Vol& x, const Vol& g, const Vol& b, double eps = 1e-6) {
  Vol y(x.shape());
  const auto cn = x.shape().back();
  for (std::size_t r = 0; r < x.numel() / cn; ++r) {
    double mu = 0.0, var = 0.0;
    for (std::size_t c = 0; c < cn; ++c) mu += x[r * cn + c];
    mu /= double(cn);
    for (std::size_t c = 0; c < cn; ++c) var += (x[r * cn + c] - mu) * (x[r * cn + c] - mu);
    var /= double(cn);
    for (std::size_t c = 0; c < cn; ++c) {
      y[r * cn + c] = g[c] * (x[r * cn + c] - mu) / std::sqrt(var + eps) + b[c];
    }
  }
  return y;
}

/// x[..., K] * w[K, N] + b over the last axis.
inline Vol mix(const Vol& x, const Vol& w, const Vol* b) {
  const auto k = w.extent(0), n = w.extent(1);
  Shape s = x.shape();
  s.back() = n;
  Vol y(s);
  for (std::size_t r = 0; r < x.numel() / k; ++r)
    for (std::size_t j = 0; j < n; ++j) {
      double acc = b ? (*b)[j] : 0.0;
      for (std::size_t i = 0; i < k; ++i) acc += x[r * k + i] * w[i * n + j];
      y[r * n + j] = acc;
    }
  return y;
}

inline Vol gelu(Vol x) {
  for (auto& v : x.storage()) v = 0.5 * v * (1.0 + std::erf(v / std::sqrt(2.0)));
  return x;
}

inline Vol add(Vol a, const Vol& b) {
  for (std::size_t i = 0; i < a.numel(); ++i) a[i] += b[i];
  return a;
}

/// Corner-aligned trilinear resampling to (D,W,H).
inline Vol upsample(const Vol& x, std::size_t D, std::size_t W, std::size_t H) {
  const std::size_t out[3] = {D, W, H};
  Vol y({D, W, H, x.extent(3)});
  auto coord = [](std::size_t i, std::size_t src, std::size_t dst) {
    return dst == 1 ? 0.0 : double(i) * double(src - 1) / double(dst - 1);
  };
  for (std::size_t d = 0; d < D; ++d)
    for (std::size_t w = 0; w < W; ++w)
      for (std::size_t h = 0; h < H; ++h) {
        const std::size_t idx[3] = {d, w, h};
        double p[3];
        for (int a = 0; a < 3; ++a) p[a] = coord(idx[a], x.extent(std::size_t(a)), out[a]);
        for (std::size_t c = 0; c < x.extent(3); ++c) {
          double s = 0.0;
          for (int corner = 0; corner < 8; ++corner) {
            double wt = 1.0;
            std::ptrdiff_t q[3];
            for (int a = 0; a < 3; ++a) {
              const double fl = std::floor(p[a]);
              const bool hi = (corner >> a) & 1;
              q[a] = std::ptrdiff_t(fl) + (hi ? 1 : 0);
              const double f = p[a] - fl;
              wt *= hi ? f : 1.0 - f;
              if (q[a] >= std::ptrdiff_t(x.extent(std::size_t(a)))) q[a] = std::ptrdiff_t(fl);
            }
            if (wt != 0.0) s += wt * at(x, q[0], q[1], q[2], c);
          }
          ref(y, d, w, h, c) = s;
        }
      }
  return y;
}

inline Vol concat(const Vol& a, const Vol& b) {
  Shape s = a.shape();
  const auto ca = a.shape().back(), cb = b.shape().back();
  s.back() = ca + cb;
  Vol y(s);
  for (std::size_t r = 0; r < a.numel() / ca; ++r) {
    for (std::size_t c = 0; c < ca; ++c) y[r * (ca + cb) + c] = a[r * ca + c];
    for (std::size_t c = 0; c < cb; ++c) y[r * (ca + cb) + ca + c] = b[r * cb + c];
  }
  return y;
}

inline std::vector<double> global_avg_pool(const Vol& x) {
  const auto cn = x.shape().back();
  std::vector<double> out(cn, 0.0);
  for (std::size_t r = 0; r < x.numel() / cn; ++r)
    for (std::size_t c = 0; c < cn; ++c) out[c] += x[r * cn + c];
  for (auto& v : out) v /= double(x.numel() / cn);
  return out;
}

}  // namespace otfpf::reference
