#pragma once

#include <cmath>
#include <cstdint>
#include <optional>
#include <string>
#include <unordered_map>
#include <vector>

#include "fcdm/ops.hpp"
#include "fcdm/rng.hpp"
#include "fcdm/tape.hpp"

namespace fcdm {

/// Named parameter tensors in declaration order.
template <class T>
class ParamStore {
 public:
  Tensor<T>& add(const std::string& name, Tensor<T> value) {
    if (index_.count(name)) throw Error("parameter declared twice: " + name);
    index_.emplace(name, names_.size());
    names_.push_back(name);
    tensors_.push_back(std::move(value));
    return tensors_.back();
  }

  bool contains(const std::string& name) const { return index_.count(name) > 0; }

  std::size_t index(const std::string& name) const {
    auto it = index_.find(name);
    if (it == index_.end()) throw Error("unknown parameter: " + name);
    return it->second;
  }

  Tensor<T>& operator[](const std::string& name) { return tensors_[index(name)]; }
  const Tensor<T>& operator[](const std::string& name) const { return tensors_[index(name)]; }

  std::size_t size() const { return names_.size(); }
  const std::vector<std::string>& names() const { return names_; }
  std::vector<Tensor<T>>& tensors() { return tensors_; }
  const std::vector<Tensor<T>>& tensors() const { return tensors_; }

  std::size_t numel() const {
    std::size_t n = 0;
    for (const auto& t : tensors_) n += t.numel();
    return n;
  }

  /// FNV-1a over names, shapes and raw values.
  std::uint64_t checksum() const {
    std::uint64_t h = fnv1a(nullptr, 0);
    for (std::size_t i = 0; i < names_.size(); ++i) {
      h = fnv1a(names_[i].data(), names_[i].size(), h);
      for (auto e : tensors_[i].shape()) {
        const std::uint64_t v = e;
        h = fnv1a(&v, sizeof v, h);
      }
      h = fnv1a(tensors_[i].data(), tensors_[i].numel() * sizeof(T), h);
    }
    return h;
  }

  template <class U>
  ParamStore<U> cast() const {
    ParamStore<U> out;
    for (std::size_t i = 0; i < names_.size(); ++i) out.add(names_[i], tensors_[i].template cast<U>());
    return out;
  }

  /// Same names and shapes in the same order.
  bool same_layout(const ParamStore& other) const {
    if (names_ != other.names_) return false;
    for (std::size_t i = 0; i < names_.size(); ++i)
      if (tensors_[i].shape() != other.tensors_[i].shape()) return false;
    return true;
  }

 private:
  std::vector<std::string> names_;
  std::vector<Tensor<T>> tensors_;
  std::unordered_map<std::string, std::size_t> index_;
};

/// Binds parameters of a store to leaves of one tape on first use.
template <class T>
class Binder {
 public:
  Binder(Tape<T>& tape, const ParamStore<T>& store, bool trainable = true)
      : tape_(tape), store_(store), trainable_(trainable), vars_(store.size()) {}

  Var<T> operator()(const std::string& name) {
    const std::size_t i = store_.index(name);
    if (!vars_[i]) vars_[i] = tape_.leaf_ref(store_.tensors()[i], trainable_);
    return *vars_[i];
  }

  /// Uses an existing tape variable for `name` instead of a fresh leaf.
  void bind(const std::string& name, Var<T> v) {
    const std::size_t i = store_.index(name);
    if (v.shape() != store_.tensors()[i].shape())
      throw ShapeError("bind " + name + ": " + shape_str(v.shape()) + " vs " + shape_str(store_.tensors()[i].shape()));
    vars_[i] = v;
  }

  bool has(const std::string& name) const { return store_.contains(name); }
  Tape<T>& tape() { return tape_; }
  const ParamStore<T>& store() const { return store_; }

  /// Gradients after tape.backward, aligned with the store; zeros for
  /// parameters the forward pass never touched.
  std::vector<Tensor<T>> grads() const {
    std::vector<Tensor<T>> out;
    out.reserve(vars_.size());
    for (std::size_t i = 0; i < vars_.size(); ++i)
      out.push_back(vars_[i] ? tape_.grad(*vars_[i]) : Tensor<T>(store_.tensors()[i].shape(), T(0)));
    return out;
  }

 private:
  Tape<T>& tape_;
  const ParamStore<T>& store_;
  bool trainable_;
  std::vector<std::optional<Var<T>>> vars_;
};

// ---------------------------------------------------------------------------
// Parameter declaration

template <class T>
Tensor<T> uniform_fan_in(Rng& rng, const Shape& shape, std::size_t fan_in) {
  const double bound = 1.0 / std::sqrt(static_cast<double>(fan_in));
  return rand_uniform<T>(rng, shape, -bound, bound);
}

/// Conv weight [cout, cin/groups, k, k] plus bias [cout].
template <class T>
void declare_conv(ParamStore<T>& ps, const std::string& name, std::size_t cin, std::size_t cout, std::size_t k,
                  Rng& rng, std::size_t groups = 1, bool zero = false) {
  const Shape ws{cout, cin / groups, k, k};
  ps.add(name + ".w", zero ? Tensor<T>(ws) : uniform_fan_in<T>(rng, ws, cin / groups * k * k));
  ps.add(name + ".b", Tensor<T>({cout}));
}

/// Linear weight [out, in] plus bias [out].
template <class T>
void declare_linear(ParamStore<T>& ps, const std::string& name, std::size_t in, std::size_t out, Rng& rng,
                    bool zero = false, double normal_std = 0) {
  Tensor<T> w = zero               ? Tensor<T>({out, in})
                : normal_std > 0 ? randn<T>(rng, {out, in})
                                   : uniform_fan_in<T>(rng, {out, in}, in);
  if (!zero && normal_std > 0)
    for (auto& v : w.values()) v = static_cast<T>(v * normal_std);
  ps.add(name + ".w", std::move(w));
  ps.add(name + ".b", Tensor<T>({out}));
}

/// Per-channel affine for a layer norm (weight 1, bias 0).
template <class T>
void declare_norm_affine(ParamStore<T>& ps, const std::string& name, std::size_t c) {
  ps.add(name + ".w", Tensor<T>({c}, T(1)));
  ps.add(name + ".b", Tensor<T>({c}));
}

// ---------------------------------------------------------------------------
// Layers

template <class T>
Var<T> conv(Binder<T>& p, const std::string& name, Var<T> x, ops::Conv2dOptions opt = {}) {
  return ops::conv2d(x, p(name + ".w"), p(name + ".b"), opt);
}

template <class T>
Var<T> linear(Binder<T>& p, const std::string& name, Var<T> x) {
  return ops::linear(x, p(name + ".w"), p(name + ".b"));
}

/// Channel layer norm without affine.
template <class T>
Var<T> layer_norm(Var<T> x) {
  return ops::layer_norm_channels(x);
}

/// Channel layer norm followed by a learnable per-channel affine.
template <class T>
Var<T> layer_norm_affine(Binder<T>& p, const std::string& name, Var<T> x) {
  return ops::add(ops::mul(ops::layer_norm_channels(x), p(name + ".w")), p(name + ".b"));
}

/// Per-sample, per-channel modulation, each [N, c].
template <class T>
struct Modulation {
  Var<T> gamma, beta, alpha;
};

/// Splits [N, 3c] into (gamma, beta, alpha).
template <class T>
Modulation<T> split_modulation(Var<T> m) {
  if (m.shape().size() != 2 || m.dim(1) % 3)
    throw ShapeError("modulation: expected [N, 3c], got " + shape_str(m.shape()));
  const std::size_t c = m.dim(1) / 3;
  return {ops::slice_channels(m, 0, c), ops::slice_channels(m, c, c), ops::slice_channels(m, 2 * c, c)};
}

/// layer_norm(x) * (1 + gamma) + beta.
template <class T>
Var<T> ada_layer_norm(Var<T> x, Var<T> gamma, Var<T> beta) {
  const Shape& s = x.shape();
  if (s.size() != 4 || gamma.shape() != Shape{s[0], s[1]} || beta.shape() != Shape{s[0], s[1]})
    throw ShapeError("ada_layer_norm: input " + shape_str(s) + " gamma " + shape_str(gamma.shape()) + " beta " +
                     shape_str(beta.shape()));
  return ops::add(ops::mul(ops::layer_norm_channels(x), ops::add_scalar(gamma, T(1))), beta);
}

template <class T>
Var<T> grn(Binder<T>& p, const std::string& name, Var<T> x) {
  return ops::grn(x, p(name + ".gamma"), p(name + ".beta"));
}

template <class T>
void declare_grn(ParamStore<T>& ps, const std::string& name, std::size_t c) {
  ps.add(name + ".gamma", Tensor<T>({c}));
  ps.add(name + ".beta", Tensor<T>({c}));
}

/// Channel gate: x * sigmoid(conv1x1(global_average_pool(x))).
template <class T>
Var<T> cca(Var<T> x, Var<T> w, Var<T> b) {
  const Shape s = x.shape();
  if (s.size() != 4) throw ShapeError("cca: expected [N,C,H,W], got " + shape_str(s));
  Var<T> pooled = ops::mean(x, {2, 3});
  Var<T> gate = ops::sigmoid(ops::conv2d(pooled, w, b));
  return ops::mul(x, ops::reshape(gate, {s[0], s[1]}));
}

template <class T>
Var<T> cca(Binder<T>& p, const std::string& name, Var<T> x) {
  return cca(x, p(name + ".w"), p(name + ".b"));
}

/// Sinusoidal features [N, dim]: sin(t f_i) for i < dim/2, then cos(t f_i),
/// with f_i = 10000^(-2i/dim).
template <class T>
Tensor<T> timestep_sinusoid(const std::vector<double>& t, std::size_t dim) {
  if (dim == 0 || dim % 2) throw Error("timestep embedding: frequency dim must be even and positive, got " +
                                       std::to_string(dim));
  if (t.empty()) throw Error("timestep embedding: empty batch");
  const std::size_t half = dim / 2;
  Tensor<T> out({t.size(), dim});
  for (std::size_t n = 0; n < t.size(); ++n)
    for (std::size_t i = 0; i < half; ++i) {
      const double f = std::pow(10000.0, -2.0 * static_cast<double>(i) / static_cast<double>(dim));
      out[n * dim + i] = static_cast<T>(std::sin(t[n] * f));
      out[n * dim + half + i] = static_cast<T>(std::cos(t[n] * f));
    }
  return out;
}

/// Sinusoid followed by Linear -> SiLU -> Linear.
template <class T>
Var<T> timestep_embedding(Binder<T>& p, const std::string& name, const std::vector<double>& t, std::size_t freq_dim) {
  Var<T> s = p.tape().constant(timestep_sinusoid<T>(t, freq_dim));
  return linear(p, name + ".fc2", ops::silu(linear(p, name + ".fc1", s)));
}

/// Row lookup in a (num_classes + 1) x D table; row num_classes is the null label.
template <class T>
Var<T> class_embedding(Binder<T>& p, const std::string& name, const std::vector<std::size_t>& y,
                       std::size_t num_classes) {
  for (auto label : y)
    if (label > num_classes)
      throw Error("class embedding: label " + std::to_string(label) + " outside [0, " + std::to_string(num_classes) +
                  "]");
  return ops::gather_rows(p(name + ".table"), y);
}

/// Replaces each label with the null label (num_classes) with probability p.
inline std::vector<std::size_t> drop_labels(std::vector<std::size_t> y, double p, std::size_t num_classes, Rng& rng) {
  for (auto& label : y)
    if (rng.uniform() < p) label = num_classes;
  return y;
}

/// Layer norm (with affine) then 2x2 stride-2 conv, c -> 2c.
template <class T>
Var<T> downsample(Binder<T>& p, const std::string& name, Var<T> x) {
  const Shape& s = x.shape();
  if (s.size() != 4 || s[2] % 2 || s[3] % 2)
    throw ShapeError("downsample: spatial extents must be even, got " + shape_str(s));
  return conv(p, name + ".conv", layer_norm_affine(p, name + ".norm", x), {.stride = 2, .padding = 0});
}

template <class T>
void declare_downsample(ParamStore<T>& ps, const std::string& name, std::size_t c, Rng& rng) {
  declare_norm_affine(ps, name + ".norm", c);
  declare_conv(ps, name + ".conv", c, 2 * c, 2, rng);
}

/// Nearest 2x then a k x k conv, c -> c/2.
template <class T>
Var<T> upsample(Binder<T>& p, const std::string& name, Var<T> x) {
  const Shape& s = x.shape();
  if (s.size() != 4 || s[1] % 2) throw ShapeError("upsample: channel count must be even, got " + shape_str(s));
  return conv(p, name + ".conv", ops::upsample_nearest2x(x));
}

template <class T>
void declare_upsample(ParamStore<T>& ps, const std::string& name, std::size_t c, std::size_t k, Rng& rng) {
  if (c % 2) throw Error("upsample: channel count must be even, got " + std::to_string(c));
  declare_conv(ps, name + ".conv", c, c / 2, k, rng);
}

}  // namespace fcdm
