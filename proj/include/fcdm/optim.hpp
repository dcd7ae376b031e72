#pragma once

#include <cmath>
#include <string>
#include <vector>

#include "fcdm/layers.hpp"

namespace fcdm {

class NonFiniteError : public Error {
 public:
  using Error::Error;
};

struct AdamWConfig {
  double lr = 1e-4;
  double beta1 = 0.9;
  double beta2 = 0.999;
  double eps = 1e-8;
  double weight_decay = 0;
};

/// First and second moments aligned with a ParamStore.
template <class T>
struct OptimizerState {
  std::vector<Tensor<T>> m, v;
  std::uint64_t step = 0;

  static OptimizerState zeros_like(const ParamStore<T>& ps) {
    OptimizerState s;
    for (const auto& t : ps.tensors()) {
      s.m.emplace_back(t.shape());
      s.v.emplace_back(t.shape());
    }
    return s;
  }
};

/// One AdamW update with bias correction and decoupled weight decay. All
/// gradients are checked before any parameter changes.
template <class T>
void adamw_step(ParamStore<T>& params, const std::vector<Tensor<T>>& grads, OptimizerState<T>& st,
                const AdamWConfig& cfg) {
  if (grads.size() != params.size() || st.m.size() != params.size() || st.v.size() != params.size())
    throw Error("adamw: " + std::to_string(grads.size()) + " gradients, " + std::to_string(st.m.size()) +
                " moment slots for " + std::to_string(params.size()) + " parameters");
  for (std::size_t i = 0; i < grads.size(); ++i) {
    if (grads[i].shape() != params.tensors()[i].shape())
      throw ShapeError("adamw: gradient of " + params.names()[i] + " has shape " + shape_str(grads[i].shape()));
    if (!grads[i].all_finite()) throw NonFiniteError("adamw: non-finite gradient for " + params.names()[i]);
  }
  ++st.step;
  const double bc1 = 1 - std::pow(cfg.beta1, double(st.step));
  const double bc2 = 1 - std::pow(cfg.beta2, double(st.step));
  for (std::size_t i = 0; i < grads.size(); ++i) {
    Tensor<T>& p = params.tensors()[i];
    T* m = st.m[i].data();
    T* v = st.v[i].data();
    const T* g = grads[i].data();
    for (std::size_t k = 0; k < p.numel(); ++k) {
      const double gk = g[k];
      m[k] = static_cast<T>(cfg.beta1 * m[k] + (1 - cfg.beta1) * gk);
      v[k] = static_cast<T>(cfg.beta2 * v[k] + (1 - cfg.beta2) * gk * gk);
      const double update = (m[k] / bc1) / (std::sqrt(v[k] / bc2) + cfg.eps) + cfg.weight_decay * p[k];
      p[k] = static_cast<T>(p[k] - cfg.lr * update);
    }
  }
}

/// shadow <- decay * shadow + (1 - decay) * params.
template <class T>
void ema_update(ParamStore<T>& shadow, const ParamStore<T>& params, double decay) {
  if (!shadow.same_layout(params)) throw Error("ema: shadow and parameters differ in layout");
  if (!(decay >= 0 && decay <= 1)) throw Error("ema: decay must lie in [0, 1]");
  for (std::size_t i = 0; i < params.size(); ++i) {
    T* s = shadow.tensors()[i].data();
    const T* p = params.tensors()[i].data();
    for (std::size_t k = 0; k < params.tensors()[i].numel(); ++k)
      s[k] = static_cast<T>(decay * s[k] + (1 - decay) * p[k]);
  }
}

}  // namespace fcdm
