#pragma once

#include <chrono>
#include <functional>
#include <ostream>
#include <string>
#include <vector>

#include "fcdm/diffusion.hpp"
#include "fcdm/gradcheck.hpp"
#include "fcdm/model.hpp"

namespace fcdm {

struct GradSuiteCase {
  std::string name;
  double f64_err = 0;
  double f32_err = 0;
  std::size_t checked = 0;
  bool pass = false;
};

struct GradSuiteOptions {
  double tol_f64 = 1e-5;
  double tol_f32 = 1e-3;
  bool include_model = true;
  std::ostream* log = nullptr;
};

struct GradSuiteReport {
  std::vector<GradSuiteCase> cases;
  double seconds = 0;

  bool pass() const {
    for (const auto& c : cases)
      if (!c.pass) return false;
    return !cases.empty();
  }

  double worst_f64() const {
    double w = 0;
    for (const auto& c : cases) w = std::max(w, c.f64_err);
    return w;
  }

  double worst_f32() const {
    double w = 0;
    for (const auto& c : cases) w = std::max(w, c.f32_err);
    return w;
  }
};

namespace detail {

/// A generic callable usable as both TensorFn<double> and TensorFn<float>.
template <class F>
GradSuiteCase run_grad_case(const std::string& name, F f, const std::vector<Tensor<double>>& in,
                            GradCheckOptions o64, GradCheckOptions o32, const GradSuiteOptions& so) {
  GradSuiteCase c;
  c.name = name;
  const TensorFn<double> f64 = [&f](Tape<double>& t, const std::vector<Var<double>>& v) { return f(t, v); };
  const auto r64 = gradcheck<double>(f64, in, o64);
  std::vector<Tensor<float>> in32;
  for (const auto& x : in) in32.push_back(x.cast<float>());
  const auto r32 = gradcheck_f32(f, in32, o32);
  c.f64_err = r64.max_rel_err;
  c.f32_err = r32.max_rel_err;
  c.checked = r64.checked + r32.checked;
  c.pass = c.f64_err < so.tol_f64 && c.f32_err < so.tol_f32;
  if (so.log)
    *so.log << (c.pass ? "  ok   " : "  FAIL ") << name << "  f64 " << c.f64_err << "  f32 " << c.f32_err << "\n";
  return c;
}

inline Tensor<double> positive(Tensor<double> t) {
  for (auto& e : t.values()) e = std::abs(e) + 0.5;
  return t;
}

template <class T>
using ValueOf = typename std::decay_t<T>::value_type;

/// Every tensor of a fresh model or block that is zero at initialisation is
/// filled with small noise so that all gradient paths are exercised.
inline void enliven(ParamStore<double>& ps, Rng& rng, double scale) {
  for (auto& t : ps.tensors()) {
    bool zero = true;
    for (double v : t.values()) zero = zero && v == 0;
    if (!zero) continue;
    t = randn<double>(rng, t.shape());
    for (auto& v : t.values()) v *= scale;
  }
}

}  // namespace detail

/// Gradient checks for every differentiable op, every layer, both block
/// families and the fcdm-toy model, each in f64 and f32.
inline GradSuiteReport run_gradient_suite(const GradSuiteOptions& so = {}) {
  namespace O = ops;
  using detail::positive;
  using detail::run_grad_case;
  const auto start = std::chrono::steady_clock::now();
  GradSuiteReport rep;
  Rng rng(2024);
  auto add = [&](const std::string& name, auto f, const std::vector<Tensor<double>>& in,
                 GradCheckOptions o64 = {.h = 1e-5}, GradCheckOptions o32 = {.h = 1e-5}) {
    rep.cases.push_back(run_grad_case(name, f, in, o64, o32, so));
  };
  const Shape s{2, 3, 3, 4};
  auto a = randn<double>(rng, s), b = randn<double>(rng, s);

  add("add", [](auto&, const auto& v) { return O::add(v[0], v[1]); }, {a, b});
  add("add_broadcast_channel", [](auto&, const auto& v) { return O::add(v[0], v[1]); },
      {a, randn<double>(rng, {3})});
  add("sub", [](auto&, const auto& v) { return O::sub(v[0], v[1]); }, {a, b});
  add("mul", [](auto&, const auto& v) { return O::mul(v[0], v[1]); }, {a, b});
  add("mul_broadcast_sample_channel", [](auto&, const auto& v) { return O::mul(v[0], v[1]); },
      {a, randn<double>(rng, {2, 3})});
  add("div", [](auto&, const auto& v) { return O::div(v[0], v[1]); }, {a, positive(b)});
  add("add_scalar_mul_scalar", [](auto&, const auto& v) { return O::mul_scalar(O::add_scalar(v[0], 0.3), -1.7); },
      {a});
  add("square", [](auto&, const auto& v) { return O::square(v[0]); }, {a});
  add("exp", [](auto&, const auto& v) { return O::exp(v[0]); }, {a});
  add("log", [](auto&, const auto& v) { return O::log(v[0]); }, {positive(a)});
  add("sqrt", [](auto&, const auto& v) { return O::sqrt(v[0]); }, {positive(a)});
  add("sigmoid", [](auto&, const auto& v) { return O::sigmoid(v[0]); }, {a});
  add("silu", [](auto&, const auto& v) { return O::silu(v[0]); }, {a});
  add("gelu", [](auto&, const auto& v) { return O::gelu(v[0]); }, {a});
  add("clamp", [](auto&, const auto& v) { return O::clamp(v[0], -1.0f, 1.0f); }, {a});
  add("sum", [](auto&, const auto& v) { return O::sum(v[0]); }, {a});
  add("mean_all", [](auto&, const auto& v) { return O::mean_all(v[0]); }, {a});
  add("mean_axes", [](auto&, const auto& v) { return O::mean(v[0], {1, 3}); }, {a});
  add("variance_axes", [](auto&, const auto& v) { return O::variance(v[0], {2, 3}); }, {a});
  add("reshape", [](auto&, const auto& v) { return O::reshape(v[0], {2, 36}); }, {a});
  add("concat_channels",
      [](auto&, const auto& v) { return O::concat_channels<detail::ValueOf<decltype(v[0])>>({v[0], v[1]}); },
      {a, randn<double>(rng, {2, 2, 3, 4})});
  add("slice_channels", [](auto&, const auto& v) { return O::slice_channels(v[0], 1, 2); }, {a});
  add("upsample_nearest2x", [](auto&, const auto& v) { return O::upsample_nearest2x(v[0]); }, {a});
  add("matmul", [](auto&, const auto& v) { return O::matmul(v[0], v[1]); },
      {randn<double>(rng, {3, 4}), randn<double>(rng, {4, 5})});
  add("linear", [](auto&, const auto& v) { return O::linear(v[0], v[1], v[2]); },
      {randn<double>(rng, {3, 4}), randn<double>(rng, {5, 4}), randn<double>(rng, {5})});
  add("gather_rows", [](auto&, const auto& v) { return O::gather_rows(v[0], {2, 0, 2, 4}); },
      {randn<double>(rng, {5, 3})});
  add("layer_norm_channels", [](auto&, const auto& v) { return O::layer_norm_channels(v[0]); },
      {randn<double>(rng, {2, 5, 3, 3})});
  add("grn_op", [](auto&, const auto& v) { return O::grn(v[0], v[1], v[2]); },
      {randn<double>(rng, {2, 4, 3, 3}), randn<double>(rng, {4}), randn<double>(rng, {4})});
  struct ConvCase {
    const char* name;
    std::size_t cin, cout, k, stride, groups;
  };
  for (const ConvCase cc : {ConvCase{"conv2d_3x3", 2, 3, 3, 1, 1}, ConvCase{"conv2d_depthwise_7x7", 3, 3, 7, 1, 3},
                            ConvCase{"conv2d_1x1_grouped", 4, 6, 1, 1, 2}, ConvCase{"conv2d_2x2_stride2", 3, 2, 2, 2, 1}}) {
    const O::Conv2dOptions opt{.stride = cc.stride,
                               .padding = cc.k == 2 ? std::optional<std::size_t>(0) : std::nullopt,
                               .groups = cc.groups};
    add(cc.name, [opt](auto&, const auto& v) { return O::conv2d(v[0], v[1], v[2], opt); },
        {randn<double>(rng, {2, cc.cin, 4, 4}), randn<double>(rng, {cc.cout, cc.cin / cc.groups, cc.k, cc.k}),
         randn<double>(rng, {cc.cout})});
  }
  {
    // Pixels on the 8-bit grid, means near them, log-variances around 1e-3.
    Tensor<double> x0({1, 2, 2, 2}), mean(x0.shape()), lv(x0.shape());
    for (std::size_t i = 0; i < x0.numel(); ++i) {
      x0[i] = std::round(rng.uniform() * 255.0) / 127.5 - 1.0;
      mean[i] = x0[i] + 0.02 * rng.normal();
      lv[i] = std::log(1e-3) + 0.5 * rng.normal();
    }
    x0[0] = -1.0;
    x0[1] = 1.0;
    add("decoder_nll",
        [x0, mean](auto&, const auto& v) {
          using T = detail::ValueOf<decltype(v[0])>;
          return decoder_nll(x0.cast<T>(), mean.cast<T>(), v[0]);
        },
        {lv});
  }

  add("layer_norm", [](auto&, const auto& v) { return layer_norm(v[0]); }, {randn<double>(rng, {2, 4, 3, 3})});
  add("ada_layer_norm", [](auto&, const auto& v) { return ada_layer_norm(v[0], v[1], v[2]); },
      {randn<double>(rng, {2, 5, 3, 3}), randn<double>(rng, {2, 5}), randn<double>(rng, {2, 5})});
  add("cca", [](auto&, const auto& v) { return cca(v[0], v[1], v[2]); },
      {randn<double>(rng, {2, 4, 3, 3}), randn<double>(rng, {4, 4, 1, 1}), randn<double>(rng, {4})});
  add("grn_layer", [](auto&, const auto& v) { return O::grn(v[0], v[1], v[2]); },
      {randn<double>(rng, {1, 6, 4, 4}), randn<double>(rng, {6}), randn<double>(rng, {6})});
  add("timestep_embedding",
      [](auto& t, const auto& v) {
        using T = detail::ValueOf<decltype(v[0])>;
        auto sn = t.constant(timestep_sinusoid<T>({3.0, 40.0}, 8));
        return O::linear(O::silu(O::linear(sn, v[0], v[1])), v[2], v[3]);
      },
      {randn<double>(rng, {6, 8}), randn<double>(rng, {6}), randn<double>(rng, {5, 6}), randn<double>(rng, {5})});
  add("class_embedding", [](auto&, const auto& v) { return O::gather_rows(v[0], {2, 0, 2, 4}); },
      {randn<double>(rng, {5, 3})});
  add("downsample",
      [](auto&, const auto& v) {
        auto n = O::add(O::mul(O::layer_norm_channels(v[0]), v[1]), v[2]);
        return O::conv2d(n, v[3], v[4], {.stride = 2, .padding = 0, .groups = 1});
      },
      {randn<double>(rng, {1, 3, 4, 4}), randn<double>(rng, {3}), randn<double>(rng, {3}),
       randn<double>(rng, {6, 3, 2, 2}), randn<double>(rng, {6})});
  add("upsample", [](auto&, const auto& v) { return O::conv2d(O::upsample_nearest2x(v[0]), v[1], v[2]); },
      {randn<double>(rng, {1, 4, 2, 2}), randn<double>(rng, {2, 4, 3, 3}), randn<double>(rng, {2})});

  const GradCheckOptions block64{.h = 1e-3};
  const GradCheckOptions block32{.h = 1e-3, .scale_floor = 1e-3};
  struct BlockCase {
    const char* name;
    const char* variant;
    const char* norm;
    bool ff;
  };
  for (const BlockCase bc : {BlockCase{"fcdm_block_grn", "fcdm", "grn", false},
                             BlockCase{"fcdm_block_cca_feedforward", "fcdm", "cca", true},
                             BlockCase{"fcdm_block_no_channel_norm", "fcdm", "none", false},
                             BlockCase{"resnet_block", "resnet", "grn", false}}) {
    FcdmConfig cfg;
    cfg.base_channels = 8;
    cfg.block_variant = bc.variant;
    cfg.channel_norm = bc.norm;
    cfg.use_feedforward = bc.ff;
    ParamStore<double> ps;
    declare_fcdm_block(ps, cfg, "b", 8, rng);
    detail::enliven(ps, rng, 0.3);
    std::vector<Tensor<double>> in{randn<double>(rng, {1, 8, 4, 4}), randn<double>(rng, {1, 8})};
    for (const auto& t : ps.tensors()) in.push_back(t);
    auto f = [cfg, ps](auto& tape, const auto& v) {
      using T = detail::ValueOf<decltype(v[0])>;
      const ParamStore<T> local = ps.template cast<T>();
      Binder<T> p(tape, local);
      for (std::size_t i = 0; i < local.size(); ++i) p.bind(local.names()[i], v[i + 2]);
      return fcdm_block(p, cfg, "b", v[0], v[1]);
    };
    add(bc.name, f, in, block64, block32);
  }

  if (so.include_model) {
    const FcdmConfig cfg = model_preset("fcdm-toy");
    Rng mr(38);
    Model<double> m = build_model<double>(cfg, mr);
    detail::enliven(m.params, mr, 0.2);
    // Variance head scaled into the smooth interior of the clamp.
    for (const char* n : {"head.conv.w", "head.conv.b"})
      for (auto& v : m.params[n].values()) v *= 0.1;
    std::vector<Tensor<double>> in{randn<double>(rng, {2, 3, 8, 8})};
    for (const auto& t : m.params.tensors()) in.push_back(t);
    auto f = [cfg, ps = m.params](auto& tape, const auto& v) {
      using T = detail::ValueOf<decltype(v[0])>;
      const ParamStore<T> local = ps.template cast<T>();
      Binder<T> p(tape, local);
      for (std::size_t i = 0; i < local.size(); ++i) p.bind(local.names()[i], v[i + 1]);
      auto out = forward(p, cfg, v[0], {7.0, 60.0}, {1, 4});
      return O::concat_channels<T>({out.eps, *out.v});
    };
    add("fcdm_toy_model", f, in, {.h = 1e-3, .max_entries = 3, .seed = 1},
        {.h = 1e-3, .max_entries = 3, .seed = 1, .scale_floor = 1e-3});
  }
  rep.seconds = std::chrono::duration<double>(std::chrono::steady_clock::now() - start).count();
  return rep;
}

}  // namespace fcdm
