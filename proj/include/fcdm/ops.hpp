#pragma once

// Elementary differentiable operators. Every function records one node on the
// tape of its first argument.
//
// Broadcasting is limited to: identical shapes, a scalar right operand, a
// per-channel vector [C] against [N,C,...], and a per-sample channel vector
// [N,C] against [N,C,H,W].

#include <Eigen/Core>

#include <algorithm>
#include <cmath>
#include <memory>
#include <numbers>
#include <optional>
#include <type_traits>
#include <set>
#include <string>
#include <vector>

#include "fcdm/tape.hpp"

namespace fcdm::ops {

namespace detail {

template <class T>
using RowMat = Eigen::Matrix<T, Eigen::Dynamic, Eigen::Dynamic, Eigen::RowMajor>;

/// C (m x n) = op(A) * op(B) [+ C]. A is stored row-major as m x k (or k x m
/// when transposed), B as k x n (or n x k).
template <class T>
void gemm(bool ta, bool tb, std::size_t m, std::size_t n, std::size_t k, const T* A, const T* B, T* C,
          bool accumulate) {
  using CMap = Eigen::Map<const RowMat<T>>;
  Eigen::Map<RowMat<T>> c(C, m, n);
  if (!accumulate) c.setZero();
  const auto M = static_cast<Eigen::Index>(m), N = static_cast<Eigen::Index>(n),
             K = static_cast<Eigen::Index>(k);
  if (!ta && !tb)
    c.noalias() += CMap(A, M, K) * CMap(B, K, N);
  else if (ta && !tb)
    c.noalias() += CMap(A, K, M).transpose() * CMap(B, K, N);
  else if (!ta && tb)
    c.noalias() += CMap(A, M, K) * CMap(B, N, K).transpose();
  else
    c.noalias() += CMap(A, K, M).transpose() * CMap(B, N, K).transpose();
}

enum class Bcast { Same, Scalar, Channel, SampleChannel };

struct BcastInfo {
  Bcast kind = Bcast::Same;
  std::size_t inner = 1;
  std::size_t channels = 1;

  std::size_t index(std::size_t i) const {
    switch (kind) {
      case Bcast::Same: return i;
      case Bcast::Scalar: return 0;
      case Bcast::Channel: return (i / inner) % channels;
      case Bcast::SampleChannel: return i / inner;
    }
    return i;
  }
};

inline BcastInfo broadcast_info(const Shape& a, const Shape& b, const char* op) {
  BcastInfo info;
  if (a == b) return info;
  if (shape_numel(b) == 1) {
    info.kind = Bcast::Scalar;
    return info;
  }
  std::size_t inner = 1;
  for (std::size_t i = 2; i < a.size(); ++i) inner *= a[i];
  if (b.size() == 1 && a.size() >= 2 && a[1] == b[0]) {
    info.kind = Bcast::Channel;
    info.inner = inner;
    info.channels = b[0];
    return info;
  }
  if (b.size() == 2 && a.size() >= 3 && a[0] == b[0] && a[1] == b[1]) {
    info.kind = Bcast::SampleChannel;
    info.inner = inner;
    info.channels = b[1];
    return info;
  }
  throw ShapeError(std::string(op) + ": cannot broadcast " + shape_str(b) + " against " + shape_str(a));
}

template <class T, class F, class DA, class DB>
Var<T> binary(const char* name, Var<T> a, Var<T> b, F f, DA da, DB db) {
  const BcastInfo bi = broadcast_info(a.shape(), b.shape(), name);
  auto fwd = [bi, f](const typename Tape<T>::Inputs& in) {
    const Tensor<T>& x = *in[0];
    const Tensor<T>& y = *in[1];
    Tensor<T> out(x.shape());
    for (std::size_t i = 0; i < x.numel(); ++i) out[i] = f(x[i], y[bi.index(i)]);
    return out;
  };
  auto bwd = [bi, da, db](const typename Tape<T>::Inputs& in, const Tensor<T>&, const Tensor<T>& g,
                          const std::vector<Tensor<T>*>& gin) {
    const Tensor<T>& x = *in[0];
    const Tensor<T>& y = *in[1];
    if (gin[0])
      for (std::size_t i = 0; i < x.numel(); ++i) (*gin[0])[i] += da(x[i], y[bi.index(i)], g[i]);
    if (gin[1])
      for (std::size_t i = 0; i < x.numel(); ++i) (*gin[1])[bi.index(i)] += db(x[i], y[bi.index(i)], g[i]);
  };
  return a.tape->record(name, {a, b}, fwd, bwd);
}

template <class T, class F, class D>
Var<T> unary(const char* name, Var<T> a, F f, D d) {
  auto fwd = [f](const typename Tape<T>::Inputs& in) {
    const Tensor<T>& x = *in[0];
    Tensor<T> out(x.shape());
    for (std::size_t i = 0; i < x.numel(); ++i) out[i] = f(x[i]);
    return out;
  };
  auto bwd = [d](const typename Tape<T>::Inputs& in, const Tensor<T>& out, const Tensor<T>& g,
                 const std::vector<Tensor<T>*>& gin) {
    const Tensor<T>& x = *in[0];
    for (std::size_t i = 0; i < x.numel(); ++i) (*gin[0])[i] += d(x[i], out[i]) * g[i];
  };
  return a.tape->record(name, {a}, fwd, bwd);
}

inline std::vector<std::size_t> strides_of(const Shape& s) {
  std::vector<std::size_t> st(s.size(), 1);
  for (std::size_t i = s.size(); i-- > 1;) st[i - 1] = st[i] * s[i];
  return st;
}

/// Maps each flat input index to its flat index in the keepdims-reduced shape.
inline std::vector<std::size_t> reduce_map(const Shape& s, const std::set<std::size_t>& axes, Shape& out_shape) {
  out_shape = s;
  for (auto ax : axes) out_shape[ax] = 1;
  const auto in_st = strides_of(s);
  const auto out_st = strides_of(out_shape);
  std::vector<std::size_t> map(shape_numel(s));
  for (std::size_t i = 0; i < map.size(); ++i) {
    std::size_t rem = i, o = 0;
    for (std::size_t d = 0; d < s.size(); ++d) {
      std::size_t coord = rem / in_st[d];
      rem %= in_st[d];
      if (!axes.count(d)) o += coord * out_st[d];
    }
    map[i] = o;
  }
  return map;
}

}  // namespace detail

// ---------------------------------------------------------------------------
// Elementwise arithmetic

template <class T>
Var<T> add(Var<T> a, Var<T> b) {
  return detail::binary<T>(
      "add", a, b, [](T x, T y) { return x + y; }, [](T, T, T g) { return g; }, [](T, T, T g) { return g; });
}

template <class T>
Var<T> sub(Var<T> a, Var<T> b) {
  return detail::binary<T>(
      "sub", a, b, [](T x, T y) { return x - y; }, [](T, T, T g) { return g; }, [](T, T, T g) { return -g; });
}

template <class T>
Var<T> mul(Var<T> a, Var<T> b) {
  return detail::binary<T>(
      "mul", a, b, [](T x, T y) { return x * y; }, [](T, T y, T g) { return y * g; },
      [](T x, T, T g) { return x * g; });
}

template <class T>
Var<T> div(Var<T> a, Var<T> b) {
  return detail::binary<T>(
      "div", a, b, [](T x, T y) { return x / y; }, [](T, T y, T g) { return g / y; },
      [](T x, T y, T g) { return -g * x / (y * y); });
}

template <class T>
Var<T> add_scalar(Var<T> a, std::type_identity_t<T> s) {
  return detail::unary<T>(
      "add_scalar", a, [s](T x) { return x + s; }, [](T, T) { return T(1); });
}

template <class T>
Var<T> mul_scalar(Var<T> a, std::type_identity_t<T> s) {
  return detail::unary<T>(
      "mul_scalar", a, [s](T x) { return x * s; }, [s](T, T) { return s; });
}

template <class T>
Var<T> square(Var<T> a) {
  return detail::unary<T>(
      "square", a, [](T x) { return x * x; }, [](T x, T) { return T(2) * x; });
}

// ---------------------------------------------------------------------------
// Nonlinearities

template <class T>
Var<T> gelu(Var<T> a) {
  return detail::unary<T>(
      "gelu", a, [](T x) { return T(0.5) * x * (T(1) + std::erf(x / std::numbers::sqrt2_v<T>)); },
      [](T x, T) {
        const T cdf = T(0.5) * (T(1) + std::erf(x / std::numbers::sqrt2_v<T>));
        const T pdf = std::exp(T(-0.5) * x * x) / std::sqrt(T(2) * std::numbers::pi_v<T>);
        return cdf + x * pdf;
      });
}

template <class T>
T sigmoid_scalar(T x) {
  return x >= 0 ? T(1) / (T(1) + std::exp(-x)) : std::exp(x) / (T(1) + std::exp(x));
}

template <class T>
Var<T> sigmoid(Var<T> a) {
  return detail::unary<T>(
      "sigmoid", a, [](T x) { return sigmoid_scalar(x); }, [](T, T y) { return y * (T(1) - y); });
}

template <class T>
Var<T> silu(Var<T> a) {
  return detail::unary<T>(
      "silu", a, [](T x) { return x * sigmoid_scalar(x); },
      [](T x, T) {
        const T s = sigmoid_scalar(x);
        return s * (T(1) + x * (T(1) - s));
      });
}

template <class T>
Var<T> sqrt(Var<T> a) {
  return detail::unary<T>(
      "sqrt", a, [](T x) { return std::sqrt(x); }, [](T, T y) { return T(0.5) / y; });
}

template <class T>
Var<T> log(Var<T> a) {
  return detail::unary<T>(
      "log", a, [](T x) { return std::log(x); }, [](T x, T) { return T(1) / x; });
}

template <class T>
Var<T> exp(Var<T> a) {
  return detail::unary<T>(
      "exp", a, [](T x) { return std::exp(x); }, [](T, T y) { return y; });
}

/// Gradient passes where lo <= x <= hi.
template <class T>
Var<T> clamp(Var<T> a, std::type_identity_t<T> lo, std::type_identity_t<T> hi) {
  return detail::unary<T>(
      "clamp", a, [lo, hi](T x) { return std::clamp(x, lo, hi); },
      [lo, hi](T x, T) { return (x >= lo && x <= hi) ? T(1) : T(0); });
}

/// Identity in value; blocks gradient flow.
template <class T>
Var<T> detach(Var<T> a) {
  return a.tape->constant(a.value());
}

// ---------------------------------------------------------------------------
// Shape manipulation

template <class T>
Var<T> reshape(Var<T> a, Shape shape) {
  if (shape_numel(shape) != a.value().numel())
    throw ShapeError("reshape: " + shape_str(a.shape()) + " -> " + shape_str(shape));
  auto fwd = [shape](const typename Tape<T>::Inputs& in) { return in[0]->reshaped(shape); };
  auto bwd = [](const typename Tape<T>::Inputs&, const Tensor<T>&, const Tensor<T>& g,
                const std::vector<Tensor<T>*>& gin) {
    for (std::size_t i = 0; i < g.numel(); ++i) (*gin[0])[i] += g[i];
  };
  return a.tape->record("reshape", {a}, fwd, bwd);
}

/// Concatenates along axis 1 (channels). Operands agree on every other axis.
template <class T>
Var<T> concat_channels(const std::vector<Var<T>>& parts) {
  if (parts.empty()) throw ShapeError("concat_channels: no operands");
  const Shape& s0 = parts[0].shape();
  if (s0.size() < 2) throw ShapeError("concat_channels: operand rank < 2: " + shape_str(s0));
  std::vector<std::size_t> chans;
  Shape out_shape = s0;
  out_shape[1] = 0;
  for (const auto& p : parts) {
    Shape s = p.shape();
    if (s.size() != s0.size()) throw ShapeError("concat_channels: " + shape_str(s0) + " vs " + shape_str(s));
    for (std::size_t d = 0; d < s.size(); ++d)
      if (d != 1 && s[d] != s0[d]) throw ShapeError("concat_channels: " + shape_str(s0) + " vs " + shape_str(s));
    chans.push_back(s[1]);
    out_shape[1] += s[1];
  }
  std::size_t inner = 1;
  for (std::size_t d = 2; d < s0.size(); ++d) inner *= s0[d];
  const std::size_t batch = s0[0], total = out_shape[1];
  auto fwd = [=](const typename Tape<T>::Inputs& in) {
    Tensor<T> out(out_shape);
    for (std::size_t n = 0; n < batch; ++n) {
      std::size_t off = 0;
      for (std::size_t k = 0; k < in.size(); ++k) {
        const T* src = in[k]->data() + n * chans[k] * inner;
        std::copy(src, src + chans[k] * inner, out.data() + (n * total + off) * inner);
        off += chans[k];
      }
    }
    return out;
  };
  auto bwd = [=](const typename Tape<T>::Inputs&, const Tensor<T>&, const Tensor<T>& g,
                 const std::vector<Tensor<T>*>& gin) {
    for (std::size_t n = 0; n < batch; ++n) {
      std::size_t off = 0;
      for (std::size_t k = 0; k < gin.size(); ++k) {
        if (gin[k]) {
          const T* src = g.data() + (n * total + off) * inner;
          T* dst = gin[k]->data() + n * chans[k] * inner;
          for (std::size_t i = 0; i < chans[k] * inner; ++i) dst[i] += src[i];
        }
        off += chans[k];
      }
    }
  };
  return parts[0].tape->record("concat_channels", parts, fwd, bwd);
}

template <class T>
Var<T> slice_channels(Var<T> a, std::size_t begin, std::size_t count) {
  const Shape s = a.shape();
  if (s.size() < 2 || count == 0 || begin + count > s[1])
    throw ShapeError("slice_channels: [" + std::to_string(begin) + ", " + std::to_string(begin + count) +
                     ") out of range for " + shape_str(s));
  std::size_t inner = 1;
  for (std::size_t d = 2; d < s.size(); ++d) inner *= s[d];
  Shape out_shape = s;
  out_shape[1] = count;
  auto fwd = [=](const typename Tape<T>::Inputs& in) {
    Tensor<T> out(out_shape);
    for (std::size_t n = 0; n < s[0]; ++n) {
      const T* src = in[0]->data() + (n * s[1] + begin) * inner;
      std::copy(src, src + count * inner, out.data() + n * count * inner);
    }
    return out;
  };
  auto bwd = [=](const typename Tape<T>::Inputs&, const Tensor<T>&, const Tensor<T>& g,
                 const std::vector<Tensor<T>*>& gin) {
    for (std::size_t n = 0; n < s[0]; ++n) {
      T* dst = gin[0]->data() + (n * s[1] + begin) * inner;
      const T* src = g.data() + n * count * inner;
      for (std::size_t i = 0; i < count * inner; ++i) dst[i] += src[i];
    }
  };
  return a.tape->record("slice_channels", {a}, fwd, bwd);
}

// ---------------------------------------------------------------------------
// Reductions

template <class T>
Var<T> sum(Var<T> a) {
  auto fwd = [](const typename Tape<T>::Inputs& in) {
    long double acc = 0;
    for (T v : in[0]->values()) acc += v;
    return Tensor<T>::scalar(static_cast<T>(acc));
  };
  auto bwd = [](const typename Tape<T>::Inputs&, const Tensor<T>&, const Tensor<T>& g,
                const std::vector<Tensor<T>*>& gin) {
    for (auto& v : gin[0]->values()) v += g[0];
  };
  return a.tape->record("sum", {a}, fwd, bwd);
}

template <class T>
Var<T> mean_all(Var<T> a) {
  return mul_scalar(sum(a), T(1) / static_cast<T>(a.value().numel()));
}

/// Mean over the given axes, keeping them as extent 1.
template <class T>
Var<T> mean(Var<T> a, const std::set<std::size_t>& axes) {
  for (auto ax : axes)
    if (ax >= a.shape().size()) throw ShapeError("mean: axis " + std::to_string(ax) + " out of range");
  Shape out_shape;
  auto map = std::make_shared<std::vector<std::size_t>>(detail::reduce_map(a.shape(), axes, out_shape));
  const T count = static_cast<T>(a.value().numel() / shape_numel(out_shape));
  auto fwd = [=](const typename Tape<T>::Inputs& in) {
    Tensor<T> out(out_shape);
    for (std::size_t i = 0; i < map->size(); ++i) out[(*map)[i]] += (*in[0])[i];
    for (auto& v : out.values()) v /= count;
    return out;
  };
  auto bwd = [=](const typename Tape<T>::Inputs&, const Tensor<T>&, const Tensor<T>& g,
                 const std::vector<Tensor<T>*>& gin) {
    for (std::size_t i = 0; i < map->size(); ++i) (*gin[0])[i] += g[(*map)[i]] / count;
  };
  return a.tape->record("mean", {a}, fwd, bwd);
}

/// Population variance over the given axes, keeping them as extent 1.
template <class T>
Var<T> variance(Var<T> a, const std::set<std::size_t>& axes) {
  for (auto ax : axes)
    if (ax >= a.shape().size()) throw ShapeError("variance: axis " + std::to_string(ax) + " out of range");
  Shape out_shape;
  auto map = std::make_shared<std::vector<std::size_t>>(detail::reduce_map(a.shape(), axes, out_shape));
  const T count = static_cast<T>(a.value().numel() / shape_numel(out_shape));
  auto means = [=](const Tensor<T>& x) {
    Tensor<T> mu(out_shape);
    for (std::size_t i = 0; i < map->size(); ++i) mu[(*map)[i]] += x[i];
    for (auto& v : mu.values()) v /= count;
    return mu;
  };
  auto fwd = [=](const typename Tape<T>::Inputs& in) {
    const Tensor<T> mu = means(*in[0]);
    Tensor<T> out(out_shape);
    for (std::size_t i = 0; i < map->size(); ++i) {
      const T d = (*in[0])[i] - mu[(*map)[i]];
      out[(*map)[i]] += d * d;
    }
    for (auto& v : out.values()) v /= count;
    return out;
  };
  auto bwd = [=](const typename Tape<T>::Inputs& in, const Tensor<T>&, const Tensor<T>& g,
                 const std::vector<Tensor<T>*>& gin) {
    const Tensor<T> mu = means(*in[0]);
    for (std::size_t i = 0; i < map->size(); ++i)
      (*gin[0])[i] += T(2) * ((*in[0])[i] - mu[(*map)[i]]) / count * g[(*map)[i]];
  };
  return a.tape->record("variance", {a}, fwd, bwd);
}

// ---------------------------------------------------------------------------
// Linear algebra

template <class T>
Var<T> matmul(Var<T> a, Var<T> b) {
  const Shape sa = a.shape(), sb = b.shape();
  if (sa.size() != 2 || sb.size() != 2 || sa[1] != sb[0])
    throw ShapeError("matmul: " + shape_str(sa) + " x " + shape_str(sb));
  const std::size_t m = sa[0], k = sa[1], n = sb[1];
  auto fwd = [=](const typename Tape<T>::Inputs& in) {
    Tensor<T> out({m, n});
    detail::gemm(false, false, m, n, k, in[0]->data(), in[1]->data(), out.data(), false);
    return out;
  };
  auto bwd = [=](const typename Tape<T>::Inputs& in, const Tensor<T>&, const Tensor<T>& g,
                 const std::vector<Tensor<T>*>& gin) {
    if (gin[0]) detail::gemm(false, true, m, k, n, g.data(), in[1]->data(), gin[0]->data(), true);
    if (gin[1]) detail::gemm(true, false, k, n, m, in[0]->data(), g.data(), gin[1]->data(), true);
  };
  return a.tape->record("matmul", {a, b}, fwd, bwd, m * n * k);
}

/// y = x W^T + b with x [N,in], W [out,in], b [out] (bias optional).
template <class T>
Var<T> linear(Var<T> x, Var<T> w, std::type_identity_t<std::optional<Var<T>>> b = std::nullopt) {
  const Shape sx = x.shape(), sw = w.shape();
  if (sx.size() != 2 || sw.size() != 2 || sx[1] != sw[1])
    throw ShapeError("linear: input " + shape_str(sx) + " weight " + shape_str(sw));
  if (b && (b->shape().size() != 1 || b->dim(0) != sw[0]))
    throw ShapeError("linear: bias " + shape_str(b->shape()) + " for weight " + shape_str(sw));
  const std::size_t n = sx[0], in_f = sx[1], out_f = sw[0];
  const bool has_bias = b.has_value();
  std::vector<Var<T>> inputs{x, w};
  if (has_bias) inputs.push_back(*b);
  auto fwd = [=](const typename Tape<T>::Inputs& in) {
    Tensor<T> out({n, out_f});
    detail::gemm(false, true, n, out_f, in_f, in[0]->data(), in[1]->data(), out.data(), false);
    if (has_bias)
      for (std::size_t i = 0; i < n; ++i)
        for (std::size_t o = 0; o < out_f; ++o) out[i * out_f + o] += (*in[2])[o];
    return out;
  };
  auto bwd = [=](const typename Tape<T>::Inputs& in, const Tensor<T>&, const Tensor<T>& g,
                 const std::vector<Tensor<T>*>& gin) {
    if (gin[0]) detail::gemm(false, false, n, in_f, out_f, g.data(), in[1]->data(), gin[0]->data(), true);
    if (gin[1]) detail::gemm(true, false, out_f, in_f, n, g.data(), in[0]->data(), gin[1]->data(), true);
    if (has_bias && gin[2])
      for (std::size_t i = 0; i < n; ++i)
        for (std::size_t o = 0; o < out_f; ++o) (*gin[2])[o] += g[i * out_f + o];
  };
  return x.tape->record("linear", inputs, fwd, bwd, n * in_f * out_f);
}

struct Conv2dOptions {
  std::size_t stride = 1;
  /// Zero padding on every side; nullopt means floor(k/2) ("same" at stride 1).
  std::optional<std::size_t> padding;
  std::size_t groups = 1;
};

namespace detail {

struct ConvGeom {
  std::size_t n, cin, h, w, cout, k, stride, pad, groups, ho, wo;
  std::size_t cin_g() const { return cin / groups; }
  std::size_t cout_g() const { return cout / groups; }
  std::size_t hwo() const { return ho * wo; }
  bool depthwise() const { return groups == cin && groups == cout; }
  bool pointwise() const { return k == 1 && stride == 1 && pad == 0; }
};

/// Columns for group g across the whole batch: [cin_g*k*k, N*Ho*Wo].
template <class T>
void im2col(const ConvGeom& g, const T* x, std::size_t grp, T* col) {
  const std::size_t cols = g.n * g.hwo();
  for (std::size_t ci = 0; ci < g.cin_g(); ++ci) {
    const std::size_t c = grp * g.cin_g() + ci;
    for (std::size_t u = 0; u < g.k; ++u)
      for (std::size_t v = 0; v < g.k; ++v) {
        T* row = col + ((ci * g.k + u) * g.k + v) * cols;
        for (std::size_t n = 0; n < g.n; ++n) {
          const T* xp = x + (n * g.cin + c) * g.h * g.w;
          T* rp = row + n * g.hwo();
          for (std::size_t i = 0; i < g.ho; ++i) {
            const long hi = static_cast<long>(i * g.stride + u) - static_cast<long>(g.pad);
            for (std::size_t j = 0; j < g.wo; ++j) {
              const long wj = static_cast<long>(j * g.stride + v) - static_cast<long>(g.pad);
              rp[i * g.wo + j] = (hi >= 0 && hi < static_cast<long>(g.h) && wj >= 0 && wj < static_cast<long>(g.w))
                                     ? xp[hi * g.w + wj]
                                     : T(0);
            }
          }
        }
      }
  }
}

template <class T>
void col2im_add(const ConvGeom& g, const T* col, std::size_t grp, T* dx) {
  const std::size_t cols = g.n * g.hwo();
  for (std::size_t ci = 0; ci < g.cin_g(); ++ci) {
    const std::size_t c = grp * g.cin_g() + ci;
    for (std::size_t u = 0; u < g.k; ++u)
      for (std::size_t v = 0; v < g.k; ++v) {
        const T* row = col + ((ci * g.k + u) * g.k + v) * cols;
        for (std::size_t n = 0; n < g.n; ++n) {
          T* xp = dx + (n * g.cin + c) * g.h * g.w;
          const T* rp = row + n * g.hwo();
          for (std::size_t i = 0; i < g.ho; ++i) {
            const long hi = static_cast<long>(i * g.stride + u) - static_cast<long>(g.pad);
            if (hi < 0 || hi >= static_cast<long>(g.h)) continue;
            for (std::size_t j = 0; j < g.wo; ++j) {
              const long wj = static_cast<long>(j * g.stride + v) - static_cast<long>(g.pad);
              if (wj >= 0 && wj < static_cast<long>(g.w)) xp[hi * g.w + wj] += rp[i * g.wo + j];
            }
          }
        }
      }
  }
}

/// [N, C, HW] <-> [C, N*HW] for the channels of one group.
template <class T>
void gather_group(const ConvGeom& g, const T* src, std::size_t c_total, std::size_t c0, std::size_t cg,
                  std::size_t hw, T* dst) {
  for (std::size_t c = 0; c < cg; ++c)
    for (std::size_t n = 0; n < g.n; ++n) {
      const T* s = src + (n * c_total + c0 + c) * hw;
      std::copy(s, s + hw, dst + (c * g.n + n) * hw);
    }
}

template <class T>
void scatter_group(const ConvGeom& g, const T* src, std::size_t c_total, std::size_t c0, std::size_t cg,
                   std::size_t hw, T* dst, bool accumulate) {
  for (std::size_t c = 0; c < cg; ++c)
    for (std::size_t n = 0; n < g.n; ++n) {
      const T* s = src + (c * g.n + n) * hw;
      T* d = dst + (n * c_total + c0 + c) * hw;
      if (accumulate)
        for (std::size_t i = 0; i < hw; ++i) d[i] += s[i];
      else
        std::copy(s, s + hw, d);
    }
}

template <class T>
void depthwise_forward(const ConvGeom& g, const T* x, const T* w, T* out) {
  const long H = static_cast<long>(g.h), W = static_cast<long>(g.w), P = static_cast<long>(g.pad);
  for (std::size_t n = 0; n < g.n; ++n)
    for (std::size_t c = 0; c < g.cin; ++c) {
      const T* xp = x + (n * g.cin + c) * g.h * g.w;
      const T* wp = w + c * g.k * g.k;
      T* op = out + (n * g.cin + c) * g.hwo();
      for (std::size_t i = 0; i < g.ho; ++i)
        for (std::size_t j = 0; j < g.wo; ++j) {
          T acc = 0;
          const long h0 = static_cast<long>(i * g.stride) - P, w0 = static_cast<long>(j * g.stride) - P;
          const long u_lo = std::max(0L, -h0), u_hi = std::min(static_cast<long>(g.k), H - h0);
          const long v_lo = std::max(0L, -w0), v_hi = std::min(static_cast<long>(g.k), W - w0);
          for (long u = u_lo; u < u_hi; ++u)
            for (long v = v_lo; v < v_hi; ++v) acc += wp[u * g.k + v] * xp[(h0 + u) * W + (w0 + v)];
          op[i * g.wo + j] += acc;
        }
    }
}

template <class T>
void depthwise_backward(const ConvGeom& g, const T* x, const T* w, const T* gout, T* dx, T* dw) {
  const long H = static_cast<long>(g.h), W = static_cast<long>(g.w), P = static_cast<long>(g.pad);
  for (std::size_t n = 0; n < g.n; ++n)
    for (std::size_t c = 0; c < g.cin; ++c) {
      const T* xp = x + (n * g.cin + c) * g.h * g.w;
      const T* wp = w + c * g.k * g.k;
      const T* gp = gout + (n * g.cin + c) * g.hwo();
      T* dxp = dx ? dx + (n * g.cin + c) * g.h * g.w : nullptr;
      T* dwp = dw ? dw + c * g.k * g.k : nullptr;
      for (std::size_t i = 0; i < g.ho; ++i)
        for (std::size_t j = 0; j < g.wo; ++j) {
          const T gv = gp[i * g.wo + j];
          const long h0 = static_cast<long>(i * g.stride) - P, w0 = static_cast<long>(j * g.stride) - P;
          const long u_lo = std::max(0L, -h0), u_hi = std::min(static_cast<long>(g.k), H - h0);
          const long v_lo = std::max(0L, -w0), v_hi = std::min(static_cast<long>(g.k), W - w0);
          for (long u = u_lo; u < u_hi; ++u)
            for (long v = v_lo; v < v_hi; ++v) {
              const long xi = (h0 + u) * W + (w0 + v);
              if (dxp) dxp[xi] += wp[u * g.k + v] * gv;
              if (dwp) dwp[u * g.k + v] += xp[xi] * gv;
            }
        }
    }
}

}  // namespace detail

/// 2-d convolution, x [N,Cin,H,W], w [Cout,Cin/groups,k,k], optional bias [Cout].
template <class T>
Var<T> conv2d(Var<T> x, Var<T> w, std::type_identity_t<std::optional<Var<T>>> b = std::nullopt, Conv2dOptions opt = {}) {
  const Shape sx = x.shape(), sw = w.shape();
  if (sx.size() != 4 || sw.size() != 4 || sw[2] != sw[3])
    throw ShapeError("conv2d: input " + shape_str(sx) + " weight " + shape_str(sw));
  detail::ConvGeom g{};
  g.n = sx[0];
  g.cin = sx[1];
  g.h = sx[2];
  g.w = sx[3];
  g.cout = sw[0];
  g.k = sw[2];
  g.stride = opt.stride;
  g.pad = opt.padding.value_or(g.k / 2);
  g.groups = opt.groups;
  if (g.groups == 0 || g.cin % g.groups || g.cout % g.groups || sw[1] != g.cin / g.groups)
    throw ShapeError("conv2d: groups=" + std::to_string(g.groups) + " incompatible with input " + shape_str(sx) +
                     " weight " + shape_str(sw));
  if (g.stride == 0 || g.h + 2 * g.pad < g.k || g.w + 2 * g.pad < g.k)
    throw ShapeError("conv2d: kernel " + std::to_string(g.k) + " does not fit input " + shape_str(sx));
  g.ho = (g.h + 2 * g.pad - g.k) / g.stride + 1;
  g.wo = (g.w + 2 * g.pad - g.k) / g.stride + 1;
  if (b && (b->shape().size() != 1 || b->dim(0) != g.cout))
    throw ShapeError("conv2d: bias " + shape_str(b->shape()) + " for " + std::to_string(g.cout) + " outputs");
  const bool has_bias = b.has_value();
  std::vector<Var<T>> inputs{x, w};
  if (has_bias) inputs.push_back(*b);

  auto fwd = [g, has_bias](const typename Tape<T>::Inputs& in) {
    Tensor<T> out({g.n, g.cout, g.ho, g.wo});
    const T* xd = in[0]->data();
    const T* wd = in[1]->data();
    if (g.depthwise()) {
      detail::depthwise_forward(g, xd, wd, out.data());
    } else {
      const std::size_t kk = g.cin_g() * g.k * g.k, cols = g.n * g.hwo();
      std::vector<T> col(kk * cols), res(g.cout_g() * cols);
      for (std::size_t grp = 0; grp < g.groups; ++grp) {
        if (g.pointwise())
          detail::gather_group(g, xd, g.cin, grp * g.cin_g(), g.cin_g(), g.hwo(), col.data());
        else
          detail::im2col(g, xd, grp, col.data());
        detail::gemm(false, false, g.cout_g(), cols, kk, wd + grp * g.cout_g() * kk, col.data(), res.data(), false);
        detail::scatter_group(g, res.data(), g.cout, grp * g.cout_g(), g.cout_g(), g.hwo(), out.data(), false);
      }
    }
    if (has_bias) {
      const T* bd = in[2]->data();
      for (std::size_t n = 0; n < g.n; ++n)
        for (std::size_t c = 0; c < g.cout; ++c) {
          T* op = out.data() + (n * g.cout + c) * g.hwo();
          for (std::size_t i = 0; i < g.hwo(); ++i) op[i] += bd[c];
        }
    }
    return out;
  };

  auto bwd = [g, has_bias](const typename Tape<T>::Inputs& in, const Tensor<T>&, const Tensor<T>& go,
                           const std::vector<Tensor<T>*>& gin) {
    const T* xd = in[0]->data();
    const T* wd = in[1]->data();
    if (g.depthwise()) {
      detail::depthwise_backward(g, xd, wd, go.data(), gin[0] ? gin[0]->data() : nullptr,
                                 gin[1] ? gin[1]->data() : nullptr);
    } else {
      const std::size_t kk = g.cin_g() * g.k * g.k, cols = g.n * g.hwo();
      std::vector<T> col(kk * cols), gmat(g.cout_g() * cols);
      for (std::size_t grp = 0; grp < g.groups; ++grp) {
        detail::gather_group(g, go.data(), g.cout, grp * g.cout_g(), g.cout_g(), g.hwo(), gmat.data());
        const T* wg = wd + grp * g.cout_g() * kk;
        if (gin[1]) {
          if (g.pointwise())
            detail::gather_group(g, xd, g.cin, grp * g.cin_g(), g.cin_g(), g.hwo(), col.data());
          else
            detail::im2col(g, xd, grp, col.data());
          detail::gemm(false, true, g.cout_g(), kk, cols, gmat.data(), col.data(),
                       gin[1]->data() + grp * g.cout_g() * kk, true);
        }
        if (gin[0]) {
          detail::gemm(true, false, kk, cols, g.cout_g(), wg, gmat.data(), col.data(), false);
          if (g.pointwise())
            detail::scatter_group(g, col.data(), g.cin, grp * g.cin_g(), g.cin_g(), g.hwo(), gin[0]->data(), true);
          else
            detail::col2im_add(g, col.data(), grp, gin[0]->data());
        }
      }
    }
    if (has_bias && gin[2])
      for (std::size_t n = 0; n < g.n; ++n)
        for (std::size_t c = 0; c < g.cout; ++c) {
          const T* gp = go.data() + (n * g.cout + c) * g.hwo();
          T acc = 0;
          for (std::size_t i = 0; i < g.hwo(); ++i) acc += gp[i];
          (*gin[2])[c] += acc;
        }
  };
  const std::uint64_t macs = static_cast<std::uint64_t>(g.n) * g.cout * g.hwo() * g.cin_g() * g.k * g.k;
  return x.tape->record("conv2d", inputs, fwd, bwd, macs);
}

/// Nearest-neighbour 2x upsampling of [N,C,H,W].
template <class T>
Var<T> upsample_nearest2x(Var<T> x) {
  const Shape s = x.shape();
  if (s.size() != 4) throw ShapeError("upsample_nearest2x: expected [N,C,H,W], got " + shape_str(s));
  const std::size_t planes = s[0] * s[1], H = s[2], W = s[3];
  auto fwd = [=](const typename Tape<T>::Inputs& in) {
    Tensor<T> out({s[0], s[1], 2 * H, 2 * W});
    for (std::size_t p = 0; p < planes; ++p)
      for (std::size_t i = 0; i < 2 * H; ++i)
        for (std::size_t j = 0; j < 2 * W; ++j)
          out[(p * 2 * H + i) * 2 * W + j] = (*in[0])[(p * H + i / 2) * W + j / 2];
    return out;
  };
  auto bwd = [=](const typename Tape<T>::Inputs&, const Tensor<T>&, const Tensor<T>& g,
                 const std::vector<Tensor<T>*>& gin) {
    for (std::size_t p = 0; p < planes; ++p)
      for (std::size_t i = 0; i < 2 * H; ++i)
        for (std::size_t j = 0; j < 2 * W; ++j)
          (*gin[0])[(p * H + i / 2) * W + j / 2] += g[(p * 2 * H + i) * 2 * W + j];
  };
  return x.tape->record("upsample_nearest2x", {x}, fwd, bwd);
}

/// Row lookup: table [R,D], indices in [0,R) -> [N,D].
template <class T>
Var<T> gather_rows(Var<T> table, const std::vector<std::size_t>& idx) {
  const Shape s = table.shape();
  if (s.size() != 2) throw ShapeError("gather_rows: table must be [R,D], got " + shape_str(s));
  if (idx.empty()) throw ShapeError("gather_rows: empty index list");
  for (auto i : idx)
    if (i >= s[0])
      throw Error("gather_rows: index " + std::to_string(i) + " out of range for " + std::to_string(s[0]) + " rows");
  const std::size_t D = s[1];
  auto fwd = [=](const typename Tape<T>::Inputs& in) {
    Tensor<T> out({idx.size(), D});
    for (std::size_t r = 0; r < idx.size(); ++r)
      std::copy(in[0]->data() + idx[r] * D, in[0]->data() + (idx[r] + 1) * D, out.data() + r * D);
    return out;
  };
  auto bwd = [=](const typename Tape<T>::Inputs&, const Tensor<T>&, const Tensor<T>& g,
                 const std::vector<Tensor<T>*>& gin) {
    for (std::size_t r = 0; r < idx.size(); ++r)
      for (std::size_t d = 0; d < D; ++d) (*gin[0])[idx[r] * D + d] += g[r * D + d];
  };
  return table.tape->record("gather_rows", {table}, fwd, bwd);
}

// ---------------------------------------------------------------------------
// Fused normalizations

/// Normalizes [N,C,H,W] over channels at every (n,h,w) with population
/// variance; no affine.
template <class T>
Var<T> layer_norm_channels(Var<T> x, T eps = T(1e-6)) {
  const Shape s = x.shape();
  if (s.size() != 4) throw ShapeError("layer_norm: expected [N,C,H,W], got " + shape_str(s));
  const std::size_t N = s[0], C = s[1], HW = s[2] * s[3];
  auto stats = [=](const Tensor<T>& in, std::vector<T>& mu, std::vector<T>& rstd) {
    mu.assign(N * HW, T(0));
    rstd.assign(N * HW, T(0));
    for (std::size_t n = 0; n < N; ++n)
      for (std::size_t p = 0; p < HW; ++p) {
        T m = 0;
        for (std::size_t c = 0; c < C; ++c) m += in[(n * C + c) * HW + p];
        m /= static_cast<T>(C);
        T v = 0;
        for (std::size_t c = 0; c < C; ++c) {
          const T d = in[(n * C + c) * HW + p] - m;
          v += d * d;
        }
        v /= static_cast<T>(C);
        mu[n * HW + p] = m;
        rstd[n * HW + p] = T(1) / std::sqrt(v + eps);
      }
  };
  auto fwd = [=](const typename Tape<T>::Inputs& in) {
    std::vector<T> mu, rstd;
    stats(*in[0], mu, rstd);
    Tensor<T> out(s);
    for (std::size_t n = 0; n < N; ++n)
      for (std::size_t c = 0; c < C; ++c)
        for (std::size_t p = 0; p < HW; ++p) {
          const std::size_t i = (n * C + c) * HW + p;
          out[i] = ((*in[0])[i] - mu[n * HW + p]) * rstd[n * HW + p];
        }
    return out;
  };
  auto bwd = [=](const typename Tape<T>::Inputs& in, const Tensor<T>& out, const Tensor<T>& g,
                    const std::vector<Tensor<T>*>& gin) {
    std::vector<T> mu, rstd;
    stats(*in[0], mu, rstd);
    for (std::size_t n = 0; n < N; ++n)
      for (std::size_t p = 0; p < HW; ++p) {
        T gm = 0, gy = 0;
        for (std::size_t c = 0; c < C; ++c) {
          const std::size_t i = (n * C + c) * HW + p;
          gm += g[i];
          gy += g[i] * out[i];
        }
        gm /= static_cast<T>(C);
        gy /= static_cast<T>(C);
        const T r = rstd[n * HW + p];
        for (std::size_t c = 0; c < C; ++c) {
          const std::size_t i = (n * C + c) * HW + p;
          (*gin[0])[i] += r * (g[i] - gm - out[i] * gy);
        }
      }
  };
  return x.tape->record("layer_norm", {x}, fwd, bwd);
}

/// Global response normalization on [N,C,H,W] with per-channel gamma, beta:
/// out = gamma * (x * n) + beta + x, n_c = ||x_c||_2 / (mean_c ||x_c||_2 + eps).
template <class T>
Var<T> grn(Var<T> x, Var<T> gamma, Var<T> beta, T eps = T(1e-6)) {
  const Shape s = x.shape();
  if (s.size() != 4) throw ShapeError("grn: expected [N,C,H,W], got " + shape_str(s));
  const std::size_t N = s[0], C = s[1], HW = s[2] * s[3];
  if (gamma.shape() != Shape{C} || beta.shape() != Shape{C})
    throw ShapeError("grn: gamma " + shape_str(gamma.shape()) + " beta " + shape_str(beta.shape()) + " for " +
                     shape_str(s));
  auto norms = [=](const Tensor<T>& in, std::vector<T>& gx, std::vector<T>& nx, std::vector<T>& denom) {
    gx.assign(N * C, T(0));
    nx.assign(N * C, T(0));
    denom.assign(N, T(0));
    for (std::size_t n = 0; n < N; ++n) {
      T m = 0;
      for (std::size_t c = 0; c < C; ++c) {
        T acc = 0;
        const T* p = in.data() + (n * C + c) * HW;
        for (std::size_t i = 0; i < HW; ++i) acc += p[i] * p[i];
        gx[n * C + c] = std::sqrt(acc);
        m += gx[n * C + c];
      }
      denom[n] = m / static_cast<T>(C) + eps;
      for (std::size_t c = 0; c < C; ++c) nx[n * C + c] = gx[n * C + c] / denom[n];
    }
  };
  auto fwd = [=](const typename Tape<T>::Inputs& in) {
    std::vector<T> gx, nx, denom;
    norms(*in[0], gx, nx, denom);
    Tensor<T> out(s);
    for (std::size_t n = 0; n < N; ++n)
      for (std::size_t c = 0; c < C; ++c) {
        const T ga = (*in[1])[c], be = (*in[2])[c], nv = nx[n * C + c];
        const T* xp = in[0]->data() + (n * C + c) * HW;
        T* op = out.data() + (n * C + c) * HW;
        for (std::size_t i = 0; i < HW; ++i) op[i] = ga * (xp[i] * nv) + be + xp[i];
      }
    return out;
  };
  auto bwd = [=](const typename Tape<T>::Inputs& in, const Tensor<T>&, const Tensor<T>& g,
                 const std::vector<Tensor<T>*>& gin) {
    std::vector<T> gx, nx, denom;
    norms(*in[0], gx, nx, denom);
    const Tensor<T>& xt = *in[0];
    for (std::size_t n = 0; n < N; ++n) {
      // sdot[c] = dL/dn_c
      std::vector<T> sdot(C, T(0));
      for (std::size_t c = 0; c < C; ++c) {
        const T ga = (*in[1])[c];
        const T* xp = xt.data() + (n * C + c) * HW;
        const T* gp = g.data() + (n * C + c) * HW;
        T acc = 0, accx = 0, accg = 0;
        for (std::size_t i = 0; i < HW; ++i) {
          accx += gp[i] * xp[i];
          accg += gp[i];
        }
        acc = ga * accx;
        sdot[c] = acc;
        if (gin[1]) (*gin[1])[c] += accx * nx[n * C + c];
        if (gin[2]) (*gin[2])[c] += accg;
      }
      if (!gin[0]) continue;
      const T d = denom[n];
      T cross = 0;
      for (std::size_t c = 0; c < C; ++c) cross += sdot[c] * gx[n * C + c];
      cross /= d * d * static_cast<T>(C);
      for (std::size_t c = 0; c < C; ++c) {
        const T ga = (*in[1])[c], nv = nx[n * C + c], gnorm = gx[n * C + c];
        const T dg = sdot[c] / d - cross;  // dL/dg_c
        const T* xp = xt.data() + (n * C + c) * HW;
        const T* gp = g.data() + (n * C + c) * HW;
        T* dx = gin[0]->data() + (n * C + c) * HW;
        for (std::size_t i = 0; i < HW; ++i) {
          T v = gp[i] * (T(1) + ga * nv);
          if (gnorm > T(0)) v += dg * xp[i] / gnorm;
          dx[i] += v;
        }
      }
    }
  };
  return x.tape->record("grn", {x, gamma, beta}, fwd, bwd);
}

}  // namespace fcdm::ops
