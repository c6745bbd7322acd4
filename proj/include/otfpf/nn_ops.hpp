#pragma once

// Tensor-level neural operations. Each is a pure function of its inputs;
// the differentiable counterparts in ops.hpp call into these.

#include <type_traits>

#include "otfpf/kernels.hpp"

namespace otfpf {

namespace detail {

template <typename T>
void require_rank(const BasicTensor<T>& t, std::size_t rank, const char* op,
                  const char* what) {
  if (t.rank() != rank) {
    throw ShapeError(std::string(op) + ": " + what + " must have rank " +
                     std::to_string(rank) + ", got " + to_string(t.shape()));
  }
}

inline Shape with_channels(Shape s, std::size_t c) {
  s.back() = c;
  return s;
}

}  // namespace detail

inline Shape pointwise_conv_shape(const Shape& x, const Shape& w, const Shape* b) {
  if (x.empty() || w.size() != 2 || w[0] != x.back()) {
    throw ShapeError("pointwise_conv: input " + to_string(x) +
                     " incompatible with weight " + to_string(w) +
                     " (weight must be [Cin,Cout] with Cin = input channels)");
  }
  if (b && (b->size() != 1 || (*b)[0] != w[1])) {
    throw ShapeError("pointwise_conv: bias " + to_string(*b) + " must be [" +
                     std::to_string(w[1]) + "]");
  }
  return detail::with_channels(x, w[1]);
}

/// Channel mixing at every location: out[..., :] = x[..., :] * weight + bias.
template <typename T>
BasicTensor<T> pointwise_conv(const BasicTensor<T>& x, const BasicTensor<T>& weight,
                              const std::type_identity_t<BasicTensor<T>>* bias = nullptr) {
  const auto* bs = bias ? &bias->shape() : nullptr;
  BasicTensor<T> y(pointwise_conv_shape(x.shape(), weight.shape(), bs));
  kernels::gemm(x.data().data(), x.rows(), x.channels(), weight.data().data(),
                weight.extent(1), bias ? bias->data().data() : nullptr,
                y.data().data());
  return y;
}

template <typename T>
BasicTensor<T> pointwise_conv(const BasicTensor<T>& x, const BasicTensor<T>& weight,
                              const BasicTensor<T>& bias) {
  return pointwise_conv(x, weight, &bias);
}

/// Matrix product plus bias for flat [N,Cin] features.
template <typename T>
BasicTensor<T> linear(const BasicTensor<T>& x, const BasicTensor<T>& weight,
                      const std::type_identity_t<BasicTensor<T>>* bias = nullptr) {
  detail::require_rank(x, 2, "linear", "input");
  if (weight.rank() != 2 || weight.extent(0) != x.extent(1)) {
    throw ShapeError("linear: inner dimension mismatch, input " +
                     to_string(x.shape()) + " weight " + to_string(weight.shape()));
  }
  return pointwise_conv(x, weight, bias);
}

template <typename T>
BasicTensor<T> linear(const BasicTensor<T>& x, const BasicTensor<T>& weight,
                      const BasicTensor<T>& bias) {
  return linear(x, weight, &bias);
}

inline kernels::ConvGeometry conv3d_geometry(const Shape& x, const Shape& w,
                                             const Conv3dSpec& spec) {
  if (spec.kernel < 1 || spec.stride < 1 || spec.groups < 1) {
    throw ConfigError("conv3d: kernel, stride and groups must be >= 1");
  }
  if (x.size() != 4) {
    throw ShapeError("conv3d: input must be [D,W,H,C], got " + to_string(x));
  }
  const std::size_t cin = x[3];
  if (cin % spec.groups != 0) {
    throw ShapeError("conv3d: input channels " + std::to_string(cin) +
                     " not divisible by groups " + std::to_string(spec.groups));
  }
  const std::size_t k = spec.kernel;
  if (w.size() != 5 || w[0] != k || w[1] != k || w[2] != k ||
      w[3] != cin / spec.groups || w[4] % spec.groups != 0) {
    throw ShapeError("conv3d: weight " + to_string(w) + " must be [" +
                     std::to_string(k) + "," + std::to_string(k) + "," +
                     std::to_string(k) + "," + std::to_string(cin / spec.groups) +
                     ",Cout] with Cout divisible by groups");
  }
  kernels::ConvGeometry g;
  g.in = {x[0], x[1], x[2]};
  g.out = {kernels::conv_out_extent(x[0], spec), kernels::conv_out_extent(x[1], spec),
           kernels::conv_out_extent(x[2], spec)};
  g.cin = cin;
  g.cout = w[4];
  g.spec = spec;
  return g;
}

/// Zero-padded strided grouped 3D cross-correlation.
/// Weight layout [k,k,k,Cin/groups,Cout].
template <typename T>
BasicTensor<T> conv3d(const BasicTensor<T>& x, const BasicTensor<T>& weight,
                      const std::type_identity_t<BasicTensor<T>>* bias,
                      const Conv3dSpec& spec) {
  const auto g = conv3d_geometry(x.shape(), weight.shape(), spec);
  if (bias && (bias->rank() != 1 || bias->extent(0) != g.cout)) {
    throw ShapeError("conv3d: bias must be [Cout]");
  }
  BasicTensor<T> y({g.out.d, g.out.w, g.out.h, g.cout});
  kernels::conv3d_forward(x.data().data(), weight.data().data(),
                          bias ? bias->data().data() : nullptr, g, y.data().data());
  return y;
}

template <typename T>
BasicTensor<T> conv3d(const BasicTensor<T>& x, const BasicTensor<T>& weight,
                      const BasicTensor<T>& bias, const Conv3dSpec& spec) {
  return conv3d(x, weight, &bias, spec);
}

inline void check_upsample(const Extent3& src, const Extent3& dst) {
  if (dst.d < src.d || dst.w < src.w || dst.h < src.h) {
    throw ShapeError("trilinear_upsample: target " + to_string(dst) +
                     " smaller than source " + to_string(src));
  }
}

/// Corner-aligned trilinear interpolation to a larger grid.
template <typename T>
BasicTensor<T> trilinear_upsample(const BasicTensor<T>& x, const Extent3& target) {
  const auto src = spatial_extent(x);
  check_upsample(src, target);
  const std::size_t c_n = x.channels();
  std::vector<double> acc(target.voxels() * c_n, 0.0);
  const T* xs = x.data().data();
  kernels::for_each_trilinear(src, target, [&](std::size_t o, std::size_t i, double wt) {
    double* a = acc.data() + o * c_n;
    const T* xi = xs + i * c_n;
    for (std::size_t c = 0; c < c_n; ++c) a[c] += wt * double(xi[c]);
  });
  std::vector<T> out(acc.begin(), acc.end());
  return BasicTensor<T>({target.d, target.w, target.h, c_n}, std::move(out));
}

inline constexpr double kLayerNormEps = 1e-6;

inline void check_layer_norm(const Shape& x, const Shape& gamma, const Shape& beta,
                             double eps) {
  if (!(eps > 0.0)) throw ConfigError("layer_norm: eps must be > 0");
  if (x.empty() || gamma.size() != 1 || beta.size() != 1 || gamma[0] != x.back() ||
      beta[0] != x.back()) {
    throw ShapeError("layer_norm: gamma/beta must be [C] matching input " +
                     to_string(x));
  }
}

/// Normalizes every channel vector to zero mean and unit variance, then
/// applies the per-channel affine map.
template <typename T>
BasicTensor<T> layer_norm(const BasicTensor<T>& x, const BasicTensor<T>& gamma,
                          const BasicTensor<T>& beta, double eps = kLayerNormEps) {
  check_layer_norm(x.shape(), gamma.shape(), beta.shape(), eps);
  BasicTensor<T> y(x.shape());
  const std::size_t c_n = x.channels();
  for (std::size_t r = 0; r < x.rows(); ++r) {
    const T* xr = x.data().data() + r * c_n;
    T* yr = y.data().data() + r * c_n;
    double mean = 0.0;
    for (std::size_t c = 0; c < c_n; ++c) mean += xr[c];
    mean /= static_cast<double>(c_n);
    double var = 0.0;
    for (std::size_t c = 0; c < c_n; ++c) {
      const double d = xr[c] - mean;
      var += d * d;
    }
    var /= static_cast<double>(c_n);
    const double rstd = 1.0 / std::sqrt(var + eps);
    for (std::size_t c = 0; c < c_n; ++c) {
      yr[c] = static_cast<T>(double(gamma[c]) * (xr[c] - mean) * rstd + double(beta[c]));
    }
  }
  return y;
}

template <typename T>
BasicTensor<T> add(const BasicTensor<T>& a, const BasicTensor<T>& b) {
  if (a.shape() != b.shape()) {
    throw ShapeError("add: shape mismatch " + to_string(a.shape()) + " vs " +
                     to_string(b.shape()));
  }
  BasicTensor<T> y(a.shape());
  for (std::size_t i = 0; i < a.numel(); ++i) y[i] = a[i] + b[i];
  return y;
}

/// Exact GELU, v * Phi(v).
template <typename T>
BasicTensor<T> gelu(const BasicTensor<T>& x) {
  BasicTensor<T> y(x.shape());
  for (std::size_t i = 0; i < x.numel(); ++i) y[i] = static_cast<T>(kernels::gelu(x[i]));
  return y;
}

inline Shape concat_shape(const std::vector<const Shape*>& parts) {
  if (parts.empty()) throw ShapeError("concat_channels: no inputs");
  Shape out = *parts.front();
  if (out.empty()) throw ShapeError("concat_channels: scalar input");
  std::size_t c = 0;
  for (const Shape* s : parts) {
    if (s->size() != out.size() ||
        !std::equal(s->begin(), s->end() - 1, out.begin())) {
      throw ShapeError("concat_channels: leading extents differ, " + to_string(out) +
                       " vs " + to_string(*s));
    }
    c += s->back();
  }
  out.back() = c;
  return out;
}

/// Stacks inputs along the channel (last) axis, in argument order.
template <typename T>
BasicTensor<T> concat_channels(const std::vector<const BasicTensor<T>*>& parts) {
  std::vector<const Shape*> shapes;
  for (auto* p : parts) shapes.push_back(&p->shape());
  BasicTensor<T> y(concat_shape(shapes));
  const std::size_t rows = y.rows();
  const std::size_t c_out = y.channels();
  std::size_t off = 0;
  for (auto* p : parts) {
    const std::size_t c = p->channels();
    for (std::size_t r = 0; r < rows; ++r) {
      std::copy_n(p->data().data() + r * c, c, y.data().data() + r * c_out + off);
    }
    off += c;
  }
  return y;
}

template <typename T>
BasicTensor<T> concat_channels(const BasicTensor<T>& a, const BasicTensor<T>& b) {
  return concat_channels<T>({&a, &b});
}

/// Mean over all non-channel positions; output is [1,C].
template <typename T>
BasicTensor<T> global_avg_pool(const BasicTensor<T>& x) {
  const std::size_t c_n = x.channels();
  std::vector<double> acc(c_n, 0.0);
  for (std::size_t r = 0; r < x.rows(); ++r) {
    for (std::size_t c = 0; c < c_n; ++c) acc[c] += x[r * c_n + c];
  }
  BasicTensor<T> y({1, c_n});
  for (std::size_t c = 0; c < c_n; ++c) {
    y[c] = static_cast<T>(acc[c] / static_cast<double>(x.rows()));
  }
  return y;
}

/// Row-major reshape to [1, numel].
template <typename T>
BasicTensor<T> flatten(const BasicTensor<T>& x) {
  return x.reshaped({1, x.numel()});
}

}  // namespace otfpf
