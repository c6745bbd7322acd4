#pragma once

// Forward and backward compute kernels over raw tensors. Storage is T,
// every reduction accumulates in double.

#include <algorithm>
#include <array>
#include <cmath>
#include <numbers>
#include <optional>

#include <Eigen/Core>

#include "otfpf/tensor.hpp"

namespace otfpf {

struct Conv3dSpec {
  std::size_t kernel = 3;
  std::size_t stride = 1;
  std::size_t padding = 0;
  std::size_t groups = 1;
};

namespace kernels {

// out[M,N] = op(a)[M,K] * op(b)[K,N] (+ bias[N]) (+ out if accumulate), where
// op transposes a stored [K,M] / [N,K] operand. Operands are widened to double
// so the blocked product accumulates in 64 bits.
template <typename T>
void gemm_ex(const T* a, bool trans_a, const T* b, bool trans_b, std::size_t m, std::size_t k,
             std::size_t n, const T* bias, T* out, bool accumulate = false) {
  using MatD = Eigen::Matrix<double, Eigen::Dynamic, Eigen::Dynamic, Eigen::RowMajor>;
  using MatT = Eigen::Matrix<T, Eigen::Dynamic, Eigen::Dynamic, Eigen::RowMajor>;
  const auto ei = [](std::size_t v) { return static_cast<Eigen::Index>(v); };
  const MatD ad = Eigen::Map<const MatT>(a, ei(trans_a ? k : m), ei(trans_a ? m : k))
                      .template cast<double>();
  const MatD bd = Eigen::Map<const MatT>(b, ei(trans_b ? n : k), ei(trans_b ? k : n))
                      .template cast<double>();
  MatD c(ei(m), ei(n));
  if (trans_a && trans_b) {
    c.noalias() = ad.transpose() * bd.transpose();
  } else if (trans_a) {
    c.noalias() = ad.transpose() * bd;
  } else if (trans_b) {
    c.noalias() = ad * bd.transpose();
  } else {
    c.noalias() = ad * bd;
  }
  Eigen::Map<MatT> o(out, ei(m), ei(n));
  if (bias) {
    c.rowwise() += Eigen::Map<const Eigen::Matrix<T, 1, Eigen::Dynamic>>(bias, ei(n))
                       .template cast<double>();
  }
  if (accumulate) c += o.template cast<double>();
  o = c.template cast<T>();
}

// out[M,N] = a[M,K] * b[K,N] (+ bias[N]) (+ out if accumulate).
template <typename T>
void gemm(const T* a, std::size_t m, std::size_t k, const T* b, std::size_t n,
          const T* bias, T* out, bool accumulate = false) {
  gemm_ex(a, false, b, false, m, k, n, bias, out, accumulate);
}

template <typename T>
std::vector<T> transpose(const T* a, std::size_t rows, std::size_t cols) {
  std::vector<T> t(rows * cols);
  for (std::size_t i = 0; i < rows; ++i) {
    for (std::size_t j = 0; j < cols; ++j) t[j * rows + i] = a[i * cols + j];
  }
  return t;
}

// Column sums of a [M,N] matrix accumulated into out[N].
template <typename T>
void add_column_sums(const T* a, std::size_t m, std::size_t n, T* out) {
  std::vector<double> acc(n, 0.0);
  for (std::size_t i = 0; i < m; ++i) {
    for (std::size_t j = 0; j < n; ++j) acc[j] += a[i * n + j];
  }
  for (std::size_t j = 0; j < n; ++j) out[j] = static_cast<T>(out[j] + acc[j]);
}

inline std::size_t conv_out_extent(std::size_t in, const Conv3dSpec& s) {
  if (in + 2 * s.padding < s.kernel) {
    throw ShapeError("conv3d: extent " + std::to_string(in) + " with padding " +
                     std::to_string(s.padding) + " is smaller than kernel " +
                     std::to_string(s.kernel));
  }
  return (in + 2 * s.padding - s.kernel) / s.stride + 1;
}

struct ConvGeometry {
  Extent3 in, out;
  std::size_t cin = 0, cout = 0;
  Conv3dSpec spec;
  std::size_t taps() const { return spec.kernel * spec.kernel * spec.kernel; }
};

// Calls fn(out_index, tap_index, in_index) for every in-bounds tap.
template <typename Fn>
void for_each_tap(const ConvGeometry& g, Fn&& fn) {
  const auto k = g.spec.kernel;
  const auto s = g.spec.stride;
  const auto p = static_cast<std::ptrdiff_t>(g.spec.padding);
  for (std::size_t od = 0; od < g.out.d; ++od) {
    for (std::size_t ow = 0; ow < g.out.w; ++ow) {
      for (std::size_t oh = 0; oh < g.out.h; ++oh) {
        const std::size_t o = (od * g.out.w + ow) * g.out.h + oh;
        for (std::size_t kd = 0; kd < k; ++kd) {
          const auto id = static_cast<std::ptrdiff_t>(od * s + kd) - p;
          if (id < 0 || id >= static_cast<std::ptrdiff_t>(g.in.d)) continue;
          for (std::size_t kw = 0; kw < k; ++kw) {
            const auto iw = static_cast<std::ptrdiff_t>(ow * s + kw) - p;
            if (iw < 0 || iw >= static_cast<std::ptrdiff_t>(g.in.w)) continue;
            for (std::size_t kh = 0; kh < k; ++kh) {
              const auto ih = static_cast<std::ptrdiff_t>(oh * s + kh) - p;
              if (ih < 0 || ih >= static_cast<std::ptrdiff_t>(g.in.h)) continue;
              const std::size_t tap = (kd * k + kw) * k + kh;
              const std::size_t in =
                  (static_cast<std::size_t>(id) * g.in.w + static_cast<std::size_t>(iw)) *
                      g.in.h +
                  static_cast<std::size_t>(ih);
              fn(o, tap, in);
            }
          }
        }
      }
    }
  }
}

// Like for_each_tap, but groups the in-bounds taps along the innermost axis
// into runs: fn(o, tap0, in0, len) covers taps tap0..tap0+len-1 reading
// inputs in0..in0+len-1 (stride-1 along h in both).
template <typename Fn>
void for_each_tap_run(const ConvGeometry& g, Fn&& fn) {
  const auto k = static_cast<std::ptrdiff_t>(g.spec.kernel);
  const auto s = static_cast<std::ptrdiff_t>(g.spec.stride);
  const auto p = static_cast<std::ptrdiff_t>(g.spec.padding);
  const auto ind = static_cast<std::ptrdiff_t>(g.in.d);
  const auto inw = static_cast<std::ptrdiff_t>(g.in.w);
  const auto inh = static_cast<std::ptrdiff_t>(g.in.h);
  for (std::size_t od = 0; od < g.out.d; ++od) {
    for (std::size_t ow = 0; ow < g.out.w; ++ow) {
      for (std::size_t oh = 0; oh < g.out.h; ++oh) {
        const std::size_t o = (od * g.out.w + ow) * g.out.h + oh;
        const std::ptrdiff_t h0 = static_cast<std::ptrdiff_t>(oh) * s - p;
        const std::ptrdiff_t kh_lo = std::max<std::ptrdiff_t>(0, -h0);
        const std::ptrdiff_t kh_hi = std::min<std::ptrdiff_t>(k, inh - h0);
        if (kh_hi <= kh_lo) continue;
        for (std::ptrdiff_t kd = 0; kd < k; ++kd) {
          const auto id = static_cast<std::ptrdiff_t>(od) * s + kd - p;
          if (id < 0 || id >= ind) continue;
          for (std::ptrdiff_t kw = 0; kw < k; ++kw) {
            const auto iw = static_cast<std::ptrdiff_t>(ow) * s + kw - p;
            if (iw < 0 || iw >= inw) continue;
            const auto tap = static_cast<std::size_t>((kd * k + kw) * k + kh_lo);
            const auto in = static_cast<std::size_t>((id * inw + iw) * inh + h0 + kh_lo);
            fn(o, tap, in, static_cast<std::size_t>(kh_hi - kh_lo));
          }
        }
      }
    }
  }
}

// Patch matrix [out_voxels, taps*cin] for dense (groups == 1) convolution.
template <typename T>
std::vector<T> im2col(const T* x, const ConvGeometry& g) {
  const std::size_t row = g.taps() * g.cin;
  std::vector<T> cols(g.out.voxels() * row, T{0});
  for_each_tap(g, [&](std::size_t o, std::size_t tap, std::size_t in) {
    std::copy_n(x + in * g.cin, g.cin, cols.data() + o * row + tap * g.cin);
  });
  return cols;
}

template <typename T>
void col2im_add(const T* cols, const ConvGeometry& g, double* dx) {
  const std::size_t row = g.taps() * g.cin;
  for_each_tap(g, [&](std::size_t o, std::size_t tap, std::size_t in) {
    const T* src = cols + o * row + tap * g.cin;
    double* dst = dx + in * g.cin;
    for (std::size_t c = 0; c < g.cin; ++c) dst[c] += src[c];
  });
}

template <typename T>
void conv3d_forward(const T* x, const T* w, const T* bias, const ConvGeometry& g,
                    T* y) {
  const auto groups = g.spec.groups;
  if (groups == 1) {
    auto cols = im2col(x, g);
    gemm(cols.data(), g.out.voxels(), g.taps() * g.cin, w, g.cout, bias, y);
    return;
  }
  const std::size_t cig = g.cin / groups;
  const std::size_t cog = g.cout / groups;
  std::vector<double> acc(g.out.voxels() * g.cout, 0.0);
  if (cig == 1 && cog == 1) {
    // depthwise: weight [taps,1,C]
    const std::size_t c_n = g.cout;
    for_each_tap_run(g, [&](std::size_t o, std::size_t tap, std::size_t in, std::size_t len) {
      double* a = acc.data() + o * c_n;
      for (std::size_t r = 0; r < len; ++r) {
        const T* xi = x + (in + r) * c_n;
        const T* wt = w + (tap + r) * c_n;
        for (std::size_t c = 0; c < c_n; ++c) a[c] += double(xi[c]) * double(wt[c]);
      }
    });
  } else {
    for_each_tap(g, [&](std::size_t o, std::size_t tap, std::size_t in) {
      double* a = acc.data() + o * g.cout;
      for (std::size_t gr = 0; gr < groups; ++gr) {
        for (std::size_t ci = 0; ci < cig; ++ci) {
          const double xv = x[in * g.cin + gr * cig + ci];
          const T* wr = w + (tap * cig + ci) * g.cout + gr * cog;
          for (std::size_t co = 0; co < cog; ++co) a[gr * cog + co] += xv * double(wr[co]);
        }
      }
    });
  }
  for (std::size_t o = 0; o < g.out.voxels(); ++o) {
    for (std::size_t c = 0; c < g.cout; ++c) {
      double v = acc[o * g.cout + c];
      if (bias) v += double(bias[c]);
      y[o * g.cout + c] = static_cast<T>(v);
    }
  }
}

// Accumulates dx, dw, dbias (each may be null).
template <typename T>
void conv3d_backward(const T* x, const T* w, const ConvGeometry& g, const T* dy,
                     T* dx, T* dw, T* dbias) {
  const auto groups = g.spec.groups;
  const std::size_t nvox_in = g.in.voxels();
  const std::size_t nvox_out = g.out.voxels();
  if (dbias) add_column_sums(dy, nvox_out, g.cout, dbias);
  if (groups == 1) {
    const std::size_t kdim = g.taps() * g.cin;
    if (dw) {
      auto cols = im2col(x, g);
      gemm_ex(cols.data(), true, dy, false, kdim, nvox_out, g.cout,
              static_cast<const T*>(nullptr), dw, true);
    }
    if (dx) {
      std::vector<T> dcols(nvox_out * kdim);
      gemm_ex(dy, false, w, true, nvox_out, g.cout, kdim, static_cast<const T*>(nullptr),
              dcols.data());
      std::vector<double> acc(nvox_in * g.cin, 0.0);
      col2im_add(dcols.data(), g, acc.data());
      for (std::size_t i = 0; i < acc.size(); ++i) dx[i] = static_cast<T>(dx[i] + acc[i]);
    }
    return;
  }
  const std::size_t cig = g.cin / groups;
  const std::size_t cog = g.cout / groups;
  std::vector<double> dx_acc(dx ? nvox_in * g.cin : 0, 0.0);
  std::vector<double> dw_acc(dw ? g.taps() * cig * g.cout : 0, 0.0);
  if (cig == 1 && cog == 1) {
    const std::size_t c_n = g.cout;
    std::vector<double> go(c_n);
    for_each_tap_run(g, [&](std::size_t o, std::size_t tap, std::size_t in, std::size_t len) {
      for (std::size_t c = 0; c < c_n; ++c) go[c] = dy[o * c_n + c];
      if (dx) {
        for (std::size_t r = 0; r < len; ++r) {
          const T* wt = w + (tap + r) * c_n;
          double* d = dx_acc.data() + (in + r) * c_n;
          for (std::size_t c = 0; c < c_n; ++c) d[c] += go[c] * double(wt[c]);
        }
      }
      if (dw) {
        for (std::size_t r = 0; r < len; ++r) {
          const T* xi = x + (in + r) * c_n;
          double* d = dw_acc.data() + (tap + r) * c_n;
          for (std::size_t c = 0; c < c_n; ++c) d[c] += go[c] * double(xi[c]);
        }
      }
    });
  } else {
    for_each_tap(g, [&](std::size_t o, std::size_t tap, std::size_t in) {
      for (std::size_t gr = 0; gr < groups; ++gr) {
        for (std::size_t ci = 0; ci < cig; ++ci) {
          const std::size_t xi = in * g.cin + gr * cig + ci;
          const std::size_t wrow = (tap * cig + ci) * g.cout + gr * cog;
          double sdx = 0.0;
          for (std::size_t co = 0; co < cog; ++co) {
            const double gv = dy[o * g.cout + gr * cog + co];
            sdx += gv * double(w[wrow + co]);
            if (dw) dw_acc[wrow + co] += gv * double(x[xi]);
          }
          if (dx) dx_acc[xi] += sdx;
        }
      }
    });
  }
  for (std::size_t i = 0; i < dx_acc.size(); ++i) dx[i] = static_cast<T>(dx[i] + dx_acc[i]);
  for (std::size_t i = 0; i < dw_acc.size(); ++i) dw[i] = static_cast<T>(dw[i] + dw_acc[i]);
}

// Corner-aligned source coordinate for output index i.
inline double aligned_coord(std::size_t i, std::size_t src, std::size_t dst) {
  if (dst == 1) return 0.0;
  return static_cast<double>(i) * static_cast<double>(src - 1) /
         static_cast<double>(dst - 1);
}

struct LerpTap {
  std::size_t lo, hi;
  double frac;
};

inline std::vector<LerpTap> lerp_taps(std::size_t src, std::size_t dst) {
  std::vector<LerpTap> taps(dst);
  for (std::size_t i = 0; i < dst; ++i) {
    const double c = aligned_coord(i, src, dst);
    auto lo = static_cast<std::size_t>(std::floor(c));
    if (lo >= src - 1) lo = src - 1;
    const std::size_t hi = std::min(lo + 1, src - 1);
    taps[i] = {lo, hi, c - static_cast<double>(lo)};
  }
  return taps;
}

// Calls fn(out_voxel, in_voxel, weight) for the 8 trilinear corners.
template <typename Fn>
void for_each_trilinear(const Extent3& in, const Extent3& out, Fn&& fn) {
  const auto td = lerp_taps(in.d, out.d);
  const auto tw = lerp_taps(in.w, out.w);
  const auto th = lerp_taps(in.h, out.h);
  for (std::size_t d = 0; d < out.d; ++d) {
    for (std::size_t w = 0; w < out.w; ++w) {
      for (std::size_t h = 0; h < out.h; ++h) {
        const std::size_t o = (d * out.w + w) * out.h + h;
        const std::array<std::size_t, 2> ds{td[d].lo, td[d].hi};
        const std::array<std::size_t, 2> ws{tw[w].lo, tw[w].hi};
        const std::array<std::size_t, 2> hs{th[h].lo, th[h].hi};
        const std::array<double, 2> dwt{1.0 - td[d].frac, td[d].frac};
        const std::array<double, 2> wwt{1.0 - tw[w].frac, tw[w].frac};
        const std::array<double, 2> hwt{1.0 - th[h].frac, th[h].frac};
        for (int a = 0; a < 2; ++a) {
          for (int b = 0; b < 2; ++b) {
            for (int c = 0; c < 2; ++c) {
              const double wt = dwt[a] * wwt[b] * hwt[c];
              if (wt == 0.0) continue;
              fn(o, (ds[a] * in.w + ws[b]) * in.h + hs[c], wt);
            }
          }
        }
      }
    }
  }
}

inline double gelu(double v) {
  return 0.5 * v * (1.0 + std::erf(v * (1.0 / std::numbers::sqrt2)));
}

inline double gelu_grad(double v) {
  const double cdf = 0.5 * (1.0 + std::erf(v * (1.0 / std::numbers::sqrt2)));
  const double pdf = std::exp(-0.5 * v * v) * 0.5 * std::numbers::inv_sqrtpi *
                     std::numbers::sqrt2;
  return cdf + v * pdf;
}

}  // namespace kernels
}  // namespace otfpf
