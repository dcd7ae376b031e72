#pragma once

#include <algorithm>
#include <cmath>
#include <functional>
#include <string>
#include <utility>
#include <vector>

#include "fcdm/ops.hpp"
#include "fcdm/rng.hpp"
#include "fcdm/tape.hpp"

namespace fcdm {

struct GradCheckResult {
  double max_rel_err = 0;
  std::size_t checked = 0;
  std::size_t worst_input = 0;
  std::size_t worst_index = 0;
};

/// Builds an output of any shape from leaves holding the given inputs.
template <class T>
using TensorFn = std::function<Var<T>(Tape<T>&, const std::vector<Var<T>>&)>;

struct GradCheckOptions {
  double h = 1e-4;
  /// Perturb only this many randomly chosen entries per input (0 = all).
  std::size_t max_entries = 0;
  std::uint64_t seed = 0;
  double floor = 1e-8;
  /// Extra denominator floor as a fraction of the largest analytic gradient
  /// magnitude of the same input (0 disables).
  double scale_floor = 0;
  /// Accuracy order of the central difference: 2 (three-point) or 4
  /// (five-point).
  int order = 4;
};

namespace detail {

template <class T>
std::vector<Tensor<T>> analytic_grads(const TensorFn<T>& f, std::vector<Tensor<T>>& inputs, Rng& rng,
                                      Tensor<double>& proj) {
  Tape<T> tape;
  std::vector<Var<T>> vars;
  for (auto& x : inputs) vars.push_back(tape.leaf_ref(x));
  Var<T> y = f(tape, vars);
  proj = randn<double>(rng, y.shape());
  for (auto& e : proj.values()) e = static_cast<double>(static_cast<T>(e));
  Var<T> loss = ops::sum(ops::mul(y, tape.constant(proj.cast<T>())));
  tape.backward(loss);
  std::vector<Tensor<T>> out;
  for (auto& v : vars) out.push_back(tape.grad(v));
  return out;
}

/// <proj, f(inputs)> accumulated in extended precision.
template <class T>
double projected(const TensorFn<T>& f, std::vector<Tensor<T>>& inputs, const Tensor<double>& proj) {
  Tape<T> tape;
  tape.set_grad_enabled(false);
  std::vector<Var<T>> vars;
  for (auto& x : inputs) vars.push_back(tape.leaf_ref(x, false));
  const Tensor<T>& y = f(tape, vars).value();
  long double acc = 0;
  for (std::size_t i = 0; i < y.numel(); ++i) acc += static_cast<long double>(y[i]) * proj[i];
  return static_cast<double>(acc);
}

template <class T, class A>
GradCheckResult compare(const TensorFn<T>& f, std::vector<Tensor<T>> inputs, const std::vector<Tensor<A>>& analytic,
                        const Tensor<double>& proj, Rng& rng, const GradCheckOptions& opt) {
  if (opt.order != 2 && opt.order != 4) throw Error("gradcheck: order must be 2 or 4");
  GradCheckResult res;
  for (std::size_t k = 0; k < inputs.size(); ++k) {
    std::vector<std::size_t> idx(inputs[k].numel());
    for (std::size_t i = 0; i < idx.size(); ++i) idx[i] = i;
    if (opt.max_entries && opt.max_entries < idx.size()) {
      idx = permutation(rng, idx.size());
      idx.resize(opt.max_entries);
    }
    double floor = opt.floor;
    if (opt.scale_floor > 0) {
      double amax = 0;
      for (std::size_t i = 0; i < analytic[k].numel(); ++i) amax = std::max(amax, std::abs(double(analytic[k][i])));
      floor = std::max(floor, opt.scale_floor * amax);
    }
    for (std::size_t i : idx) {
      T& slot = inputs[k][i];
      const T orig = slot;
      auto at = [&](double offset) {
        slot = static_cast<T>(orig + offset);
        const double v = projected(f, inputs, proj);
        slot = orig;
        return v;
      };
      slot = static_cast<T>(orig + opt.h);
      const double xp = slot;
      slot = static_cast<T>(orig - opt.h);
      const double xm = slot;
      slot = orig;
      const double d1 = (at(opt.h) - at(-opt.h)) / (xp - xm);
      double num = d1;
      if (opt.order == 4) {
        const double d2 = (at(2 * opt.h) - at(-2 * opt.h)) / (2 * (xp - xm));
        num = (4 * d1 - d2) / 3;
      }
      if (!std::isfinite(num))
        throw Error("gradcheck: non-finite function value near entry " + std::to_string(i) + " of input " +
                    std::to_string(k));
      const double ana = analytic[k][i];
      const double err = std::abs(ana - num) / std::max({std::abs(ana), std::abs(num), floor});
      ++res.checked;
      if (err > res.max_rel_err) {
        res.max_rel_err = err;
        res.worst_input = k;
        res.worst_index = i;
      }
    }
  }
  return res;
}

}  // namespace detail

/// Compares reverse-mode gradients of the scalar <w, f(x)> with central
/// differences (Richardson-extrapolated by default), for a fixed random
/// projection w. The relative error per entry
/// is |a - n| / max(|a|, |n|, floor).
template <class T>
GradCheckResult gradcheck(const TensorFn<T>& f, std::vector<Tensor<T>> inputs, const GradCheckOptions& opt = {}) {
  Rng rng(opt.seed);
  Tensor<double> proj;
  auto analytic = detail::analytic_grads(f, inputs, rng, proj);
  return detail::compare(f, std::move(inputs), analytic, proj, rng, opt);
}

/// Checks f32 reverse-mode gradients. The reference central differences are
/// taken on the f64 instantiation of the same function at the same point.
/// `f` must be callable with both tape types.
template <class F>
GradCheckResult gradcheck_f32(F&& f, const std::vector<Tensor<float>>& inputs, const GradCheckOptions& opt = {}) {
  TensorFn<float> f32 = [&f](Tape<float>& t, const std::vector<Var<float>>& v) { return f(t, v); };
  TensorFn<double> f64 = [&f](Tape<double>& t, const std::vector<Var<double>>& v) { return f(t, v); };
  Rng rng(opt.seed);
  Tensor<double> proj;
  std::vector<Tensor<float>> in32 = inputs;
  auto analytic = detail::analytic_grads(f32, in32, rng, proj);
  std::vector<Tensor<double>> in64;
  for (const auto& x : inputs) in64.push_back(x.cast<double>());
  return detail::compare(f64, std::move(in64), analytic, proj, rng, opt);
}

}  // namespace fcdm
