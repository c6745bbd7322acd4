#pragma once

// Differentiable wrappers: each records one node whose forward is the
// tensor-level op from nn_ops.hpp and whose backward is hand-derived.

#include <optional>
#include <type_traits>

#include "otfpf/autograd.hpp"
#include "otfpf/nn_ops.hpp"

namespace otfpf {

namespace detail {

template <typename T>
Graph<T>& same_graph(const Var<T>& a, const Var<T>& b) {
  if (&a.graph() != &b.graph()) {
    throw std::logic_error("operands recorded on different graphs");
  }
  return a.graph();
}

}  // namespace detail

template <typename T>
Var<T> add(const Var<T>& a, const Var<T>& b) {
  auto& g = detail::same_graph(a, b);
  const auto ia = a.id(), ib = b.id();
  return g.record(
      "add", {ia, ib},
      [=](const Graph<T>& gr) { return add(gr.value(ia), gr.value(ib)); },
      [=](Graph<T>& gr, const BasicTensor<T>& go) {
        gr.accumulate_grad(ia, go);
        gr.accumulate_grad(ib, go);
      });
}

/// Elementwise product of equally shaped tensors.
template <typename T>
Var<T> mul(const Var<T>& a, const Var<T>& b) {
  auto& g = detail::same_graph(a, b);
  const auto ia = a.id(), ib = b.id();
  if (a.shape() != b.shape()) {
    throw ShapeError("mul: shape mismatch " + to_string(a.shape()) + " vs " +
                     to_string(b.shape()));
  }
  return g.record(
      "mul", {ia, ib},
      [=](const Graph<T>& gr) {
        const auto& x = gr.value(ia);
        const auto& y = gr.value(ib);
        BasicTensor<T> out(x.shape());
        for (std::size_t i = 0; i < out.numel(); ++i) out[i] = x[i] * y[i];
        return out;
      },
      [=](Graph<T>& gr, const BasicTensor<T>& go) {
        const auto& x = gr.value(ia);
        const auto& y = gr.value(ib);
        if (gr.requires_grad(ia)) {
          BasicTensor<T> d(x.shape());
          for (std::size_t i = 0; i < d.numel(); ++i) d[i] = go[i] * y[i];
          gr.accumulate_grad(ia, d);
        }
        if (gr.requires_grad(ib)) {
          BasicTensor<T> d(x.shape());
          for (std::size_t i = 0; i < d.numel(); ++i) d[i] = go[i] * x[i];
          gr.accumulate_grad(ib, d);
        }
      });
}

template <typename T>
Var<T> scale(const Var<T>& x, double s) {
  const auto ix = x.id();
  return x.graph().record(
      "scale", {ix},
      [=](const Graph<T>& gr) {
        const auto& v = gr.value(ix);
        BasicTensor<T> out(v.shape());
        for (std::size_t i = 0; i < out.numel(); ++i) out[i] = static_cast<T>(v[i] * s);
        return out;
      },
      [=](Graph<T>& gr, const BasicTensor<T>& go) {
        BasicTensor<T> d(go.shape());
        for (std::size_t i = 0; i < d.numel(); ++i) d[i] = static_cast<T>(go[i] * s);
        gr.accumulate_grad(ix, d);
      });
}

/// Sum of all entries, shape [1].
template <typename T>
Var<T> sum(const Var<T>& x) {
  const auto ix = x.id();
  return x.graph().record(
      "sum", {ix},
      [=](const Graph<T>& gr) {
        double s = 0.0;
        for (T v : gr.value(ix).data()) s += v;
        return BasicTensor<T>({1}, {static_cast<T>(s)});
      },
      [=](Graph<T>& gr, const BasicTensor<T>& go) {
        BasicTensor<T> d(gr.value(ix).shape(), go[0]);
        gr.accumulate_grad(ix, d);
      });
}

/// Weighted sum of all entries against a fixed tensor, shape [1].
template <typename T>
Var<T> dot_const(const Var<T>& x, BasicTensor<T> weights) {
  if (weights.shape() != x.shape()) {
    throw ShapeError("dot_const: weights must match input shape");
  }
  const auto ix = x.id();
  auto w = std::make_shared<const BasicTensor<T>>(std::move(weights));
  return x.graph().record(
      "dot_const", {ix},
      [=](const Graph<T>& gr) {
        double s = 0.0;
        const auto& v = gr.value(ix);
        for (std::size_t i = 0; i < v.numel(); ++i) s += double(v[i]) * double((*w)[i]);
        return BasicTensor<T>({1}, {static_cast<T>(s)});
      },
      [=](Graph<T>& gr, const BasicTensor<T>& go) {
        BasicTensor<T> d(w->shape());
        for (std::size_t i = 0; i < d.numel(); ++i) d[i] = go[0] * (*w)[i];
        gr.accumulate_grad(ix, d);
      });
}

/// |x - target| for a single-element x.
template <typename T>
Var<T> abs_diff(const Var<T>& x, double target) {
  if (x.value().numel() != 1) {
    throw ShapeError("abs_diff: expects a single prediction, got " +
                     to_string(x.shape()));
  }
  const auto ix = x.id();
  return x.graph().record(
      "abs_diff", {ix},
      [=](const Graph<T>& gr) {
        return BasicTensor<T>({1}, {static_cast<T>(std::abs(gr.value(ix)[0] - target))});
      },
      [=](Graph<T>& gr, const BasicTensor<T>& go) {
        const double r = double(gr.value(ix)[0]) - target;
        const double sgn = r > 0 ? 1.0 : (r < 0 ? -1.0 : 0.0);
        BasicTensor<T> d(gr.value(ix).shape());
        d[0] = static_cast<T>(go[0] * sgn);
        gr.accumulate_grad(ix, d);
      });
}

template <typename T>
Var<T> gelu(const Var<T>& x) {
  const auto ix = x.id();
  return x.graph().record(
      "gelu", {ix}, [=](const Graph<T>& gr) { return gelu(gr.value(ix)); },
      [=](Graph<T>& gr, const BasicTensor<T>& go) {
        const auto& v = gr.value(ix);
        BasicTensor<T> d(v.shape());
        for (std::size_t i = 0; i < d.numel(); ++i) {
          d[i] = static_cast<T>(go[i] * kernels::gelu_grad(v[i]));
        }
        gr.accumulate_grad(ix, d);
      });
}

template <typename T>
Var<T> reshape(const Var<T>& x, Shape shape) {
  if (shape_numel(shape) != x.value().numel()) {
    throw ShapeError("reshape: " + to_string(x.shape()) + " -> " + to_string(shape));
  }
  const auto ix = x.id();
  return x.graph().record(
      "reshape", {ix}, [=](const Graph<T>& gr) { return gr.value(ix).reshaped(shape); },
      [=](Graph<T>& gr, const BasicTensor<T>& go) {
        gr.accumulate_grad(ix, go.reshaped(gr.value(ix).shape()));
      });
}

template <typename T>
Var<T> flatten(const Var<T>& x) {
  return reshape(x, {1, x.value().numel()});
}

namespace detail {

// Shared backward of pointwise_conv / linear: x[M,K], w[K,N], dy[M,N].
template <typename T>
void channel_mix_backward(Graph<T>& gr, std::size_t ix, std::size_t iw,
                          std::optional<std::size_t> ib, const BasicTensor<T>& go) {
  const auto& x = gr.value(ix);
  const auto& w = gr.value(iw);
  const std::size_t m = x.rows(), k = x.channels(), n = w.extent(1);
  const T* dy = go.data().data();
  if (gr.requires_grad(ix)) {
    auto& dx = gr.grad_buffer(ix);
    kernels::gemm_ex(dy, false, w.data().data(), true, m, n, k, static_cast<const T*>(nullptr),
                     dx.data().data(), true);
  }
  if (gr.requires_grad(iw)) {
    auto& dw = gr.grad_buffer(iw);
    kernels::gemm_ex(x.data().data(), true, dy, false, k, m, n, static_cast<const T*>(nullptr),
                     dw.data().data(), true);
  }
  if (ib && gr.requires_grad(*ib)) {
    auto& db = gr.grad_buffer(*ib);
    kernels::add_column_sums(dy, m, n, db.data().data());
  }
}

}  // namespace detail

template <typename T>
Var<T> pointwise_conv(const Var<T>& x, const Var<T>& w,
                      std::type_identity_t<std::optional<Var<T>>> b = std::nullopt) {
  auto& g = detail::same_graph(x, w);
  const auto ix = x.id(), iw = w.id();
  std::optional<std::size_t> ib;
  std::vector<std::size_t> ins{ix, iw};
  if (b) {
    detail::same_graph(x, *b);
    ib = b->id();
    ins.push_back(*ib);
  }
  return g.record(
      "pointwise_conv", ins,
      [=](const Graph<T>& gr) {
        return pointwise_conv(gr.value(ix), gr.value(iw), ib ? &gr.value(*ib) : nullptr);
      },
      [=](Graph<T>& gr, const BasicTensor<T>& go) {
        detail::channel_mix_backward(gr, ix, iw, ib, go);
      });
}

template <typename T>
Var<T> linear(const Var<T>& x, const Var<T>& w, std::type_identity_t<std::optional<Var<T>>> b = std::nullopt) {
  detail::require_rank(x.value(), 2, "linear", "input");
  if (w.value().rank() != 2 || w.value().extent(0) != x.value().extent(1)) {
    throw ShapeError("linear: inner dimension mismatch, input " + to_string(x.shape()) +
                     " weight " + to_string(w.shape()));
  }
  return pointwise_conv(x, w, b);
}

template <typename T>
Var<T> conv3d(const Var<T>& x, const Var<T>& w, std::type_identity_t<std::optional<Var<T>>> b,
              const Conv3dSpec& spec) {
  auto& g = detail::same_graph(x, w);
  const auto ix = x.id(), iw = w.id();
  std::optional<std::size_t> ib;
  std::vector<std::size_t> ins{ix, iw};
  if (b) {
    detail::same_graph(x, *b);
    ib = b->id();
    ins.push_back(*ib);
  }
  return g.record(
      "conv3d", ins,
      [=](const Graph<T>& gr) {
        return conv3d(gr.value(ix), gr.value(iw), ib ? &gr.value(*ib) : nullptr, spec);
      },
      [=](Graph<T>& gr, const BasicTensor<T>& go) {
        const auto& xv = gr.value(ix);
        const auto& wv = gr.value(iw);
        const auto geo = conv3d_geometry(xv.shape(), wv.shape(), spec);
        T* dx = gr.requires_grad(ix) ? gr.grad_buffer(ix).data().data() : nullptr;
        T* dw = gr.requires_grad(iw) ? gr.grad_buffer(iw).data().data() : nullptr;
        T* db = (ib && gr.requires_grad(*ib)) ? gr.grad_buffer(*ib).data().data() : nullptr;
        kernels::conv3d_backward(xv.data().data(), wv.data().data(), geo,
                                 go.data().data(), dx, dw, db);
      });
}

template <typename T>
Var<T> trilinear_upsample(const Var<T>& x, const Extent3& target) {
  check_upsample(spatial_extent(x.value()), target);
  const auto ix = x.id();
  return x.graph().record(
      "trilinear_upsample", {ix},
      [=](const Graph<T>& gr) { return trilinear_upsample(gr.value(ix), target); },
      [=](Graph<T>& gr, const BasicTensor<T>& go) {
        const auto& xv = gr.value(ix);
        const auto src = spatial_extent(xv);
        const std::size_t c_n = xv.channels();
        std::vector<double> acc(xv.numel(), 0.0);
        kernels::for_each_trilinear(src, target,
                                    [&](std::size_t o, std::size_t i, double wt) {
                                      double* a = acc.data() + i * c_n;
                                      const T* gi = go.data().data() + o * c_n;
                                      for (std::size_t c = 0; c < c_n; ++c)
                                        a[c] += wt * double(gi[c]);
                                    });
        auto& dx = gr.grad_buffer(ix);
        for (std::size_t i = 0; i < acc.size(); ++i) dx[i] = static_cast<T>(dx[i] + acc[i]);
      });
}

template <typename T>
Var<T> layer_norm(const Var<T>& x, const Var<T>& gamma, const Var<T>& beta,
                  double eps = kLayerNormEps) {
  auto& g = detail::same_graph(x, gamma);
  detail::same_graph(x, beta);
  check_layer_norm(x.shape(), gamma.shape(), beta.shape(), eps);
  const auto ix = x.id(), ig = gamma.id(), ib = beta.id();
  return g.record(
      "layer_norm", {ix, ig, ib},
      [=](const Graph<T>& gr) {
        return layer_norm(gr.value(ix), gr.value(ig), gr.value(ib), eps);
      },
      [=](Graph<T>& gr, const BasicTensor<T>& go) {
        const auto& xv = gr.value(ix);
        const auto& gv = gr.value(ig);
        const std::size_t c_n = xv.channels();
        const bool need_x = gr.requires_grad(ix);
        std::vector<double> dgamma(c_n, 0.0), dbeta(c_n, 0.0), xhat(c_n), dxhat(c_n);
        T* dx = need_x ? gr.grad_buffer(ix).data().data() : nullptr;
        for (std::size_t r = 0; r < xv.rows(); ++r) {
          const T* xr = xv.data().data() + r * c_n;
          const T* gr_ = go.data().data() + r * c_n;
          double mean = 0.0;
          for (std::size_t c = 0; c < c_n; ++c) mean += xr[c];
          mean /= double(c_n);
          double var = 0.0;
          for (std::size_t c = 0; c < c_n; ++c) var += (xr[c] - mean) * (xr[c] - mean);
          var /= double(c_n);
          const double rstd = 1.0 / std::sqrt(var + eps);
          double m1 = 0.0, m2 = 0.0;
          for (std::size_t c = 0; c < c_n; ++c) {
            xhat[c] = (xr[c] - mean) * rstd;
            dgamma[c] += double(gr_[c]) * xhat[c];
            dbeta[c] += gr_[c];
            dxhat[c] = double(gr_[c]) * double(gv[c]);
            m1 += dxhat[c];
            m2 += dxhat[c] * xhat[c];
          }
          if (dx) {
            m1 /= double(c_n);
            m2 /= double(c_n);
            T* dr = dx + r * c_n;
            for (std::size_t c = 0; c < c_n; ++c) {
              dr[c] = static_cast<T>(dr[c] + rstd * (dxhat[c] - m1 - xhat[c] * m2));
            }
          }
        }
        if (gr.requires_grad(ig)) {
          auto& d = gr.grad_buffer(ig);
          for (std::size_t c = 0; c < c_n; ++c) d[c] = static_cast<T>(d[c] + dgamma[c]);
        }
        if (gr.requires_grad(ib)) {
          auto& d = gr.grad_buffer(ib);
          for (std::size_t c = 0; c < c_n; ++c) d[c] = static_cast<T>(d[c] + dbeta[c]);
        }
      });
}

template <typename T>
Var<T> concat_channels(const std::vector<Var<T>>& parts) {
  if (parts.empty()) throw ShapeError("concat_channels: no inputs");
  std::vector<std::size_t> ids;
  std::vector<const Shape*> shapes;
  for (const auto& p : parts) {
    detail::same_graph(parts.front(), p);
    ids.push_back(p.id());
    shapes.push_back(&p.shape());
  }
  concat_shape(shapes);
  return parts.front().graph().record(
      "concat_channels", ids,
      [=](const Graph<T>& gr) {
        std::vector<const BasicTensor<T>*> vals;
        for (auto id : ids) vals.push_back(&gr.value(id));
        return concat_channels(vals);
      },
      [=](Graph<T>& gr, const BasicTensor<T>& go) {
        const std::size_t c_out = go.channels();
        const std::size_t rows = go.rows();
        std::size_t off = 0;
        for (auto id : ids) {
          const std::size_t c = gr.value(id).channels();
          if (gr.requires_grad(id)) {
            auto& d = gr.grad_buffer(id);
            for (std::size_t r = 0; r < rows; ++r) {
              for (std::size_t k = 0; k < c; ++k) d[r * c + k] += go[r * c_out + off + k];
            }
          }
          off += c;
        }
      });
}

template <typename T>
Var<T> global_avg_pool(const Var<T>& x) {
  const auto ix = x.id();
  return x.graph().record(
      "global_avg_pool", {ix},
      [=](const Graph<T>& gr) { return global_avg_pool(gr.value(ix)); },
      [=](Graph<T>& gr, const BasicTensor<T>& go) {
        auto& d = gr.grad_buffer(ix);
        const std::size_t c_n = d.channels();
        const double inv = 1.0 / double(d.rows());
        for (std::size_t r = 0; r < d.rows(); ++r) {
          for (std::size_t c = 0; c < c_n; ++c) {
            d[r * c_n + c] = static_cast<T>(d[r * c_n + c] + go[c] * inv);
          }
        }
      });
}

/// 2D matrix product with optional transposition of either operand.
template <typename T>
Var<T> matmul(const Var<T>& a, const Var<T>& b, bool trans_a = false,
              bool trans_b = false) {
  auto& g = detail::same_graph(a, b);
  const auto& av = a.value();
  const auto& bv = b.value();
  if (av.rank() != 2 || bv.rank() != 2) throw ShapeError("matmul: operands must be 2D");
  const std::size_t m = trans_a ? av.extent(1) : av.extent(0);
  const std::size_t k = trans_a ? av.extent(0) : av.extent(1);
  const std::size_t kb = trans_b ? bv.extent(1) : bv.extent(0);
  const std::size_t n = trans_b ? bv.extent(0) : bv.extent(1);
  if (k != kb) {
    throw ShapeError("matmul: inner dimension mismatch " + to_string(av.shape()) + " vs " +
                     to_string(bv.shape()));
  }
  const auto ia = a.id(), ib = b.id();
  auto op_a = [=](const BasicTensor<T>& t) {
    return trans_a ? kernels::transpose(t.data().data(), k, m)
                   : std::vector<T>(t.data().begin(), t.data().end());
  };
  auto op_b = [=](const BasicTensor<T>& t) {
    return trans_b ? kernels::transpose(t.data().data(), n, k)
                   : std::vector<T>(t.data().begin(), t.data().end());
  };
  return g.record(
      "matmul", {ia, ib},
      [=](const Graph<T>& gr) {
        auto am = op_a(gr.value(ia));
        auto bm = op_b(gr.value(ib));
        BasicTensor<T> out({m, n});
        kernels::gemm(am.data(), m, k, bm.data(), n, static_cast<const T*>(nullptr),
                      out.data().data());
        return out;
      },
      [=](Graph<T>& gr, const BasicTensor<T>& go) {
        const T* dc = go.data().data();
        if (gr.requires_grad(ia)) {
          // d(op(A)) = dC * op(B)^T, shape [m,k]
          auto bm = op_b(gr.value(ib));
          auto bt = kernels::transpose(bm.data(), k, n);
          std::vector<T> dop(m * k);
          kernels::gemm(dc, m, n, bt.data(), k, static_cast<const T*>(nullptr), dop.data());
          auto& d = gr.grad_buffer(ia);
          if (trans_a) {
            auto t = kernels::transpose(dop.data(), m, k);
            for (std::size_t i = 0; i < t.size(); ++i) d[i] += t[i];
          } else {
            for (std::size_t i = 0; i < dop.size(); ++i) d[i] += dop[i];
          }
        }
        if (gr.requires_grad(ib)) {
          // d(op(B)) = op(A)^T * dC, shape [k,n]
          auto am = op_a(gr.value(ia));
          auto at = kernels::transpose(am.data(), m, k);
          std::vector<T> dop(k * n);
          kernels::gemm(at.data(), k, m, dc, n, static_cast<const T*>(nullptr), dop.data());
          auto& d = gr.grad_buffer(ib);
          if (trans_b) {
            auto t = kernels::transpose(dop.data(), k, n);
            for (std::size_t i = 0; i < t.size(); ++i) d[i] += t[i];
          } else {
            for (std::size_t i = 0; i < dop.size(); ++i) d[i] += dop[i];
          }
        }
      });
}

}  // namespace otfpf
