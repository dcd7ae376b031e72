#pragma once

#include <cmath>
#include <functional>
#include <numbers>
#include <optional>
#include <string>
#include <vector>

#include "fcdm/config.hpp"
#include "fcdm/model.hpp"

namespace fcdm {

/// Beta tables of a discrete forward process. `timesteps[i]` is the index
/// into the original (unrespaced) process that step i corresponds to; it is
/// what the model sees as its timestep input.
struct NoiseSchedule {
  std::vector<double> beta, alpha, alpha_bar, alpha_bar_prev, beta_tilde;
  /// beta_tilde with t = 0 floored to beta_tilde[1], and its log.
  std::vector<double> beta_tilde_floored, log_beta_tilde;
  std::vector<double> timesteps;

  std::size_t size() const { return beta.size(); }

  void check_t(std::size_t t, const char* op) const {
    if (t >= size())
      throw Error(std::string(op) + ": timestep " + std::to_string(t) + " outside [0, " + std::to_string(size()) +
                  ")");
  }
};

namespace detail {

inline NoiseSchedule schedule_from_betas(std::vector<double> beta, std::vector<double> timesteps) {
  NoiseSchedule s;
  const std::size_t T = beta.size();
  s.beta = std::move(beta);
  s.timesteps = std::move(timesteps);
  s.alpha.resize(T);
  s.alpha_bar.resize(T);
  s.alpha_bar_prev.resize(T);
  s.beta_tilde.resize(T);
  s.beta_tilde_floored.resize(T);
  s.log_beta_tilde.resize(T);
  double prod = 1;
  for (std::size_t t = 0; t < T; ++t) {
    s.alpha[t] = 1 - s.beta[t];
    s.alpha_bar_prev[t] = prod;
    prod *= s.alpha[t];
    s.alpha_bar[t] = prod;
    s.beta_tilde[t] = (1 - s.alpha_bar_prev[t]) / (1 - s.alpha_bar[t]) * s.beta[t];
  }
  for (std::size_t t = 0; t < T; ++t) {
    s.beta_tilde_floored[t] = t == 0 ? (T > 1 ? s.beta_tilde[1] : s.beta[0]) : s.beta_tilde[t];
    s.log_beta_tilde[t] = std::log(s.beta_tilde_floored[t]);
  }
  return s;
}

}  // namespace detail

/// Linearly spaced betas from beta_start to beta_end inclusive.
inline NoiseSchedule make_linear_schedule(std::size_t T, double beta_start, double beta_end) {
  if (T < 1) throw Error("schedule: T must be >= 1");
  if (!(beta_start > 0) || beta_start > beta_end || !(beta_end < 1))
    throw Error("schedule: need 0 < beta_start <= beta_end < 1, got " + std::to_string(beta_start) + ", " +
                std::to_string(beta_end));
  std::vector<double> beta(T), ts(T);
  for (std::size_t t = 0; t < T; ++t) {
    beta[t] = T == 1 ? beta_start : beta_start + (beta_end - beta_start) * double(t) / double(T - 1);
    ts[t] = double(t);
  }
  return detail::schedule_from_betas(std::move(beta), std::move(ts));
}

struct ScheduleConfig {
  std::size_t steps = 1000;
  /// "linear" (1e-4 -> 2e-2 at T = 1000, scaled by 1000/T for other T) or
  /// "paper-literal" (1e-4 -> 2e-4).
  std::string kind = "linear";
  friend bool operator==(const ScheduleConfig&, const ScheduleConfig&) = default;
};

inline NoiseSchedule make_schedule(const ScheduleConfig& c) {
  if (c.steps < 1) throw ConfigError("schedule: steps must be >= 1");
  if (c.kind == "linear") {
    const double scale = 1000.0 / double(c.steps);
    return make_linear_schedule(c.steps, scale * 1e-4, std::min(scale * 2e-2, 0.999));
  }
  if (c.kind == "paper-literal") return make_linear_schedule(c.steps, 1e-4, 2e-4);
  throw ConfigError("schedule: kind must be linear or paper-literal, got " + c.kind);
}

inline void to_json(json& j, const ScheduleConfig& c) { j = json{{"steps", c.steps}, {"kind", c.kind}}; }

inline void from_json(const json& j, ScheduleConfig& c) {
  check_keys(j, {"steps", "kind"}, "schedule");
  read_key(j, "steps", c.steps, "schedule");
  read_key(j, "kind", c.kind, "schedule");
  make_schedule(c);
}

/// Evenly spaced subset of `steps` timesteps with betas re-derived so that
/// alpha_bar at every kept timestep is unchanged.
inline NoiseSchedule respace(const NoiseSchedule& s, std::size_t steps) {
  const std::size_t T = s.size();
  if (steps < 1 || steps > T)
    throw Error("respace: steps must be in [1, " + std::to_string(T) + "], got " + std::to_string(steps));
  if (steps == T) return s;
  std::vector<std::size_t> keep;
  for (std::size_t i = 0; i < steps; ++i) {
    const std::size_t t = steps == 1 ? T - 1 : std::size_t(std::llround(double(i) * double(T - 1) / double(steps - 1)));
    if (keep.empty() || keep.back() != t) keep.push_back(t);
  }
  std::vector<double> beta, ts;
  double last = 1;
  for (std::size_t t : keep) {
    beta.push_back(1 - s.alpha_bar[t] / last);
    last = s.alpha_bar[t];
    ts.push_back(s.timesteps[t]);
  }
  return detail::schedule_from_betas(std::move(beta), std::move(ts));
}

// ---------------------------------------------------------------------------
// Closed forms

namespace detail {

/// Per-sample scalars broadcast to [N, C] so they combine with [N,C,H,W] maps.
template <class T>
Tensor<T> per_sample(const std::vector<double>& v, std::size_t C) {
  Tensor<T> out({v.size(), C});
  for (std::size_t n = 0; n < v.size(); ++n)
    for (std::size_t c = 0; c < C; ++c) out[n * C + c] = static_cast<T>(v[n]);
  return out;
}

template <class T>
void check_batch(const Tensor<T>& x, const std::vector<std::size_t>& t, const char* op) {
  if (x.ndim() != 4 || x.dim(0) != t.size())
    throw ShapeError(std::string(op) + ": expected [N,C,H,W] with N = " + std::to_string(t.size()) + ", got " +
                     shape_str(x.shape()));
}

template <class T, class F>
Tensor<T> per_sample_map(const Tensor<T>& a, const std::vector<std::size_t>& t, F f) {
  Tensor<T> out(a.shape());
  const std::size_t S = a.numel() / a.dim(0);
  for (std::size_t n = 0; n < a.dim(0); ++n)
    for (std::size_t i = 0; i < S; ++i) out[n * S + i] = static_cast<T>(f(n, t[n], n * S + i));
  return out;
}

}  // namespace detail

/// sqrt(alpha_bar[t]) x0 + sqrt(1 - alpha_bar[t]) eps, with per-sample t.
template <class T>
Tensor<T> q_sample(const Tensor<T>& x0, const std::vector<std::size_t>& t, const Tensor<T>& eps,
                   const NoiseSchedule& s) {
  detail::check_batch(x0, t, "q_sample");
  if (eps.shape() != x0.shape()) throw ShapeError("q_sample: eps " + shape_str(eps.shape()) + " vs x0 " + shape_str(x0.shape()));
  for (auto ti : t) s.check_t(ti, "q_sample");
  return detail::per_sample_map(x0, t, [&](std::size_t, std::size_t ti, std::size_t i) {
    return std::sqrt(s.alpha_bar[ti]) * double(x0[i]) + std::sqrt(1 - s.alpha_bar[ti]) * double(eps[i]);
  });
}

/// Mean of p(x_{t-1} | x_t) from an epsilon prediction.
template <class T>
Tensor<T> posterior_mean(const Tensor<T>& x_t, const Tensor<T>& eps_pred, const std::vector<std::size_t>& t,
                         const NoiseSchedule& s) {
  detail::check_batch(x_t, t, "posterior_mean");
  if (eps_pred.shape() != x_t.shape())
    throw ShapeError("posterior_mean: eps " + shape_str(eps_pred.shape()) + " vs x_t " + shape_str(x_t.shape()));
  for (auto ti : t) s.check_t(ti, "posterior_mean");
  return detail::per_sample_map(x_t, t, [&](std::size_t, std::size_t ti, std::size_t i) {
    return (double(x_t[i]) - (1 - s.alpha[ti]) / std::sqrt(1 - s.alpha_bar[ti]) * double(eps_pred[i])) /
           std::sqrt(s.alpha[ti]);
  });
}

/// Mean of q(x_{t-1} | x_t, x0_hat) where x0_hat is the x0 implied by eps_pred,
/// clamped to [-1, 1]. Equals posterior_mean wherever no clamping occurs.
template <class T>
Tensor<T> clipped_posterior_mean(const Tensor<T>& x_t, const Tensor<T>& eps_pred, const std::vector<std::size_t>& t,
                                 const NoiseSchedule& s) {
  detail::check_batch(x_t, t, "clipped_posterior_mean");
  if (eps_pred.shape() != x_t.shape())
    throw ShapeError("clipped_posterior_mean: eps " + shape_str(eps_pred.shape()) + " vs x_t " +
                     shape_str(x_t.shape()));
  for (auto ti : t) s.check_t(ti, "clipped_posterior_mean");
  return detail::per_sample_map(x_t, t, [&](std::size_t, std::size_t ti, std::size_t i) {
    const double ab = s.alpha_bar[ti], abp = s.alpha_bar_prev[ti];
    const double x0 =
        std::clamp((double(x_t[i]) - std::sqrt(1 - ab) * double(eps_pred[i])) / std::sqrt(ab), -1.0, 1.0);
    return s.beta[ti] * std::sqrt(abp) / (1 - ab) * x0 + (1 - abp) * std::sqrt(s.alpha[ti]) / (1 - ab) * double(x_t[i]);
  });
}

/// exp(v log beta[t] + (1 - v) log beta_tilde[t]) per element, evaluated as
/// beta^v beta_tilde^(1-v) so both endpoints are exact.
template <class T>
Tensor<T> model_variance(const Tensor<T>& v, const std::vector<std::size_t>& t, const NoiseSchedule& s) {
  detail::check_batch(v, t, "model_variance");
  for (auto ti : t) s.check_t(ti, "model_variance");
  return detail::per_sample_map(v, t, [&](std::size_t, std::size_t ti, std::size_t i) {
    const double w = v[i];
    if (!(w >= 0 && w <= 1)) throw Error("model_variance: interpolation weight outside [0, 1]");
    return std::pow(s.beta[ti], w) * std::pow(s.beta_tilde_floored[ti], 1 - w);
  });
}

/// Fixed variance used when the model does not learn sigma.
inline double fixed_variance(const NoiseSchedule& s, std::size_t t) {
  return t == 0 && s.size() > 1 ? s.beta_tilde[1] : s.beta[t];
}

/// KL(N(m1, exp(lv1)) || N(m2, exp(lv2))) per element, in nats.
inline double gaussian_kl(double m1, double lv1, double m2, double lv2) {
  return 0.5 * (lv2 - lv1 + std::expm1(lv1 - lv2) + (m1 - m2) * (m1 - m2) * std::exp(-lv2));
}

inline double std_normal_cdf(double x) { return 0.5 * (1.0 + std::erf(x / std::numbers::sqrt2)); }

// ---------------------------------------------------------------------------
// Hybrid objective

template <class T>
struct LossTerms {
  Var<T> loss;
  double simple = 0;
  double vlb = 0;
  /// The weighted VLB contribution to `loss`, when present.
  std::optional<Var<T>> vlb_term;
};

namespace detail {

/// -log P(bin of x0 | N(mean, exp(lv))), with x0 in [-1, 1] on a 256-level grid
/// and open outer bins. Returns the NLL and its derivative in lv.
inline std::pair<double, double> decoder_nll_element(double x0, double mean, double lv) {
  const double delta = 1.0 / 255.0, inv = std::exp(-0.5 * lv);
  const double c = x0 - mean;
  const double a = (c - delta) * inv, b = (c + delta) * inv;
  auto pdf = [](double z) { return std::exp(-0.5 * z * z) / std::sqrt(2 * std::numbers::pi); };
  auto tail = [](double z) { return 0.5 * std::erfc(z / std::numbers::sqrt2); };  // 1 - Phi(z)
  double p, dp;  // probability and its derivative in lv
  if (x0 < -0.999) {
    p = 1 - tail(b);
    dp = -0.5 * b * pdf(b);
  } else if (x0 > 0.999) {
    p = tail(a);
    dp = 0.5 * a * pdf(a);
  } else {
    p = a > 0 ? tail(a) - tail(b) : (1 - tail(b)) - (1 - tail(a));
    dp = -0.5 * (b * pdf(b) - a * pdf(a));
  }
  if (p < 1e-12) return {-std::log(1e-12), 0.0};
  return {-std::log(p), -dp / p};
}

}  // namespace detail

/// Per-element discretized Gaussian decoder NLL (nats), differentiable in the
/// log variance.
template <class T>
Var<T> decoder_nll(const Tensor<T>& x0, const Tensor<T>& mean, Var<T> logvar) {
  if (x0.shape() != mean.shape() || logvar.shape() != x0.shape())
    throw ShapeError("decoder_nll: x0 " + shape_str(x0.shape()) + ", mean " + shape_str(mean.shape()) +
                     ", logvar " + shape_str(logvar.shape()));
  auto fwd = [x0, mean](const std::vector<const Tensor<T>*>& in) {
    Tensor<T> out(x0.shape());
    for (std::size_t i = 0; i < out.numel(); ++i)
      out[i] = static_cast<T>(detail::decoder_nll_element(x0[i], mean[i], (*in[0])[i]).first);
    return out;
  };
  auto bwd = [x0, mean](const std::vector<const Tensor<T>*>& in, const Tensor<T>&, const Tensor<T>& gout,
                        const std::vector<Tensor<T>*>& gin) {
    if (!gin[0]) return;
    for (std::size_t i = 0; i < gout.numel(); ++i)
      (*gin[0])[i] += static_cast<T>(double(gout[i]) * detail::decoder_nll_element(x0[i], mean[i], (*in[0])[i]).second);
  };
  return logvar.tape->record("decoder_nll", {logvar}, fwd, bwd);
}

/// L_simple + lambda * T * L_t from model outputs. The VLB term sees eps_pred
/// only through a detached copy, so its gradient reaches v alone. L_t is the
/// KL of the true posterior from the model's reverse step in bits per
/// dimension, or the discretized Gaussian decoder NLL at t = 0 (data assumed
/// in [-1, 1] with 256 bins).
template <class T>
LossTerms<T> hybrid_loss_terms(Var<T> eps_pred, std::type_identity_t<std::optional<Var<T>>> v, const Tensor<T>& x0, const Tensor<T>& x_t,
                               const Tensor<T>& eps, const std::vector<std::size_t>& t, const NoiseSchedule& s,
                               double lambda = 1e-3) {
  Tape<T>& tape = *eps_pred.tape;
  const Shape& shape = x0.shape();
  detail::check_batch(x0, t, "loss_hybrid");
  if (eps_pred.shape() != shape || eps.shape() != shape || x_t.shape() != shape)
    throw ShapeError("loss_hybrid: eps_pred " + shape_str(eps_pred.shape()) + ", x0 " + shape_str(shape));
  Var<T> simple = ops::mean_all(ops::square(ops::sub(tape.constant(eps), eps_pred)));
  LossTerms<T> out{simple, double(simple.value().item()), 0, std::nullopt};
  if (!v) return out;

  const std::size_t N = shape[0], C = shape[1], S = x0.numel() / N;
  const Tensor<T> frozen = eps_pred.value();
  const Tensor<T> mean_p = posterior_mean(x_t, frozen, t, s);
  std::vector<double> log_beta(N), log_bt(N);
  for (std::size_t n = 0; n < N; ++n) {
    log_beta[n] = std::log(s.beta[t[n]]);
    log_bt[n] = s.log_beta_tilde[t[n]];
  }
  // logvar_p = v (log beta - log beta_tilde) + log beta_tilde.
  std::vector<double> span(N);
  for (std::size_t n = 0; n < N; ++n) span[n] = log_beta[n] - log_bt[n];
  Var<T> logvar_p = ops::add(ops::mul(*v, tape.constant(detail::per_sample<T>(span, C))),
                             tape.constant(detail::per_sample<T>(log_bt, C)));

  // Decoder samples (t = 0) and KL samples are masked into one per-element term.
  Tensor<T> kl_mask(shape), dec_mask(shape), dmean2(shape), logvar_q(shape);
  for (std::size_t n = 0; n < N; ++n) {
    const std::size_t ti = t[n];
    const double coef0 = s.beta[ti] * std::sqrt(s.alpha_bar_prev[ti]) / (1 - s.alpha_bar[ti]);
    const double coeft = (1 - s.alpha_bar_prev[ti]) * std::sqrt(s.alpha[ti]) / (1 - s.alpha_bar[ti]);
    for (std::size_t i = n * S; i < (n + 1) * S; ++i) {
      const double mq = coef0 * double(x0[i]) + coeft * double(x_t[i]);
      const double d = mq - double(mean_p[i]);
      if (ti == 0) {
        dec_mask[i] = T(1);
      } else {
        kl_mask[i] = T(1);
        dmean2[i] = static_cast<T>(d * d);
        logvar_q[i] = static_cast<T>(s.log_beta_tilde[ti]);
      }
    }
  }
  // KL term: 0.5 (-1 + lv_p - lv_q + exp(lv_q - lv_p) + dmean^2 exp(-lv_p)).
  Var<T> neg = ops::mul_scalar(logvar_p, T(-1));
  Var<T> kl = ops::add(ops::sub(logvar_p, tape.constant(logvar_q)),
                       ops::mul(ops::exp(neg), ops::add(ops::exp(tape.constant(logvar_q)), tape.constant(dmean2))));
  kl = ops::mul_scalar(ops::add_scalar(kl, T(-1)), T(0.5));
  Var<T> term = ops::mul(kl, tape.constant(kl_mask));

  bool any_decoder = false;
  for (auto ti : t) any_decoder = any_decoder || ti == 0;
  if (any_decoder) term = ops::add(term, ops::mul(decoder_nll(x0, mean_p, logvar_p), tape.constant(dec_mask)));

  // Mean over dimensions per sample, in bits, then over the batch.
  Var<T> vlb = ops::mul_scalar(ops::mean_all(term), T(1.0 / std::numbers::ln2));
  out.vlb = double(vlb.value().item());
  const double weight = lambda * double(s.size());
  out.vlb_term = ops::mul_scalar(vlb, static_cast<T>(weight));
  out.loss = ops::add(simple, *out.vlb_term);
  return out;
}

// ---------------------------------------------------------------------------
// Model-facing objectives and samplers

/// Model evaluation used by the samplers: epsilon (or velocity) prediction
/// plus the optional interpolation weight.
template <class T>
using PredictFn =
    std::function<Prediction<T>(const Tensor<T>& x, const std::vector<double>& t, const std::vector<std::size_t>& y)>;

template <class T>
PredictFn<T> model_predictor(const Model<T>& m) {
  return [&m](const Tensor<T>& x, const std::vector<double>& t, const std::vector<std::size_t>& y) {
    return predict(m, x, t, y);
  };
}

/// Draws per-sample timesteps uniformly from [0, T).
inline std::vector<std::size_t> sample_timesteps(std::size_t n, const NoiseSchedule& s, Rng& rng) {
  std::vector<std::size_t> t(n);
  for (auto& ti : t) ti = rng.below(s.size());
  return t;
}

/// Hybrid loss of a model on a clean batch. Draws t and eps from `rng`.
template <class T>
LossTerms<T> loss_hybrid(Binder<T>& p, const FcdmConfig& cfg, const Tensor<T>& x0, const std::vector<std::size_t>& y,
                         const NoiseSchedule& s, Rng& rng, double lambda = 1e-3) {
  const auto t = sample_timesteps(x0.dim(0), s, rng);
  const Tensor<T> eps = randn<T>(rng, x0.shape());
  const Tensor<T> x_t = q_sample(x0, t, eps, s);
  std::vector<double> tin(t.size());
  for (std::size_t n = 0; n < t.size(); ++n) tin[n] = s.timesteps[t[n]];
  auto out = forward(p, cfg, p.tape().constant(x_t), tin, y);
  return hybrid_loss_terms(out.eps, out.v, x0, x_t, eps, t, s, lambda);
}

struct Guidance {
  double scale = 1.0;
};

namespace detail {

/// Conditional prediction, or the guided combination eps_u + w (eps_c - eps_u)
/// evaluated as one doubled batch. The variance output comes from the
/// conditional half.
template <class T>
Prediction<T> guided(const PredictFn<T>& f, const Tensor<T>& x, const std::vector<double>& t,
                     const std::vector<std::size_t>& y, const Guidance& g, std::size_t null_label) {
  if (g.scale == 1.0) return f(x, t, y);
  const std::size_t N = x.dim(0), S = x.numel() / N;
  Shape s2 = x.shape();
  s2[0] = 2 * N;
  Tensor<T> x2(s2);
  std::copy(x.data(), x.data() + x.numel(), x2.data());
  std::copy(x.data(), x.data() + x.numel(), x2.data() + x.numel());
  std::vector<double> t2 = t;
  t2.insert(t2.end(), t.begin(), t.end());
  std::vector<std::size_t> y2 = y;
  y2.insert(y2.end(), N, null_label);
  Prediction<T> both = f(x2, t2, y2);
  Prediction<T> out{Tensor<T>(x.shape()), std::nullopt};
  const double w = g.scale;
  for (std::size_t i = 0; i < N * S; ++i) {
    const double c = both.eps[i], u = both.eps[N * S + i];
    out.eps[i] = static_cast<T>(u + w * (c - u));
  }
  if (both.v) {
    Tensor<T> v(x.shape());
    std::copy(both.v->data(), both.v->data() + N * S, v.data());
    out.v = std::move(v);
  }
  return out;
}

}  // namespace detail

struct SampleOptions {
  std::size_t steps = 0;  // 0 = every timestep of the schedule
  Guidance guidance;
  std::size_t null_label = 0;  // num_classes of the model
  /// Clamp the implied x0 to [-1, 1] before forming the mean.
  bool clip_denoised = false;
};

/// Ancestral sampling from N(0, I). Each step uses posterior_mean (or
/// clipped_posterior_mean) for the mean and model_variance (or the fixed variance without a v output); no noise is
/// added at the final step.
template <class T>
Tensor<T> p_sample_loop(const PredictFn<T>& f, const Shape& shape, const std::vector<std::size_t>& y,
                        const NoiseSchedule& base, const SampleOptions& opt, Rng& rng) {
  if (!(opt.guidance.scale >= 0) || !std::isfinite(opt.guidance.scale))
    throw Error("p_sample_loop: guidance scale must be finite and >= 0");
  if (shape.size() != 4 || shape[0] != y.size())
    throw ShapeError("p_sample_loop: shape " + shape_str(shape) + " with " + std::to_string(y.size()) + " labels");
  if (opt.guidance.scale != 1.0)
    for (auto label : y)
      if (label == opt.null_label) throw Error("p_sample_loop: guided sampling needs conditional labels");
  const NoiseSchedule s = opt.steps ? respace(base, opt.steps) : base;
  Tensor<T> x = randn<T>(rng, shape);
  const std::size_t N = shape[0];
  for (std::size_t i = s.size(); i-- > 0;) {
    const std::vector<std::size_t> t(N, i);
    const std::vector<double> tin(N, s.timesteps[i]);
    Prediction<T> pred = detail::guided(f, x, tin, y, opt.guidance, opt.null_label);
    Tensor<T> mean = opt.clip_denoised ? clipped_posterior_mean(x, pred.eps, t, s) : posterior_mean(x, pred.eps, t, s);
    if (i == 0) {
      x = std::move(mean);
      break;
    }
    Tensor<T> var = pred.v ? model_variance(*pred.v, t, s) : Tensor<T>(shape, static_cast<T>(fixed_variance(s, i)));
    const Tensor<T> z = randn<T>(rng, shape);
    for (std::size_t k = 0; k < x.numel(); ++k)
      x[k] = static_cast<T>(double(mean[k]) + std::sqrt(double(var[k])) * double(z[k]));
  }
  return x;
}

// ---------------------------------------------------------------------------
// Flow matching

/// Model timestep input for a continuous time t in (0, 1).
inline double flow_model_time(double t) { return 1000.0 * t; }

/// Draws t uniformly from the open interval (0, 1).
inline std::vector<double> sample_flow_times(std::size_t n, Rng& rng) {
  std::vector<double> t(n);
  for (auto& ti : t) {
    do ti = rng.uniform();
    while (ti <= 0.0);
  }
  return t;
}

/// (1 - t) x0 + t eps.
template <class T>
Tensor<T> flow_interpolate(const Tensor<T>& x0, const Tensor<T>& eps, const std::vector<double>& t) {
  if (x0.shape() != eps.shape() || x0.ndim() != 4 || x0.dim(0) != t.size())
    throw ShapeError("flow: x0 " + shape_str(x0.shape()) + ", eps " + shape_str(eps.shape()));
  Tensor<T> out(x0.shape());
  const std::size_t S = x0.numel() / x0.dim(0);
  for (std::size_t n = 0; n < t.size(); ++n) {
    if (!(t[n] > 0 && t[n] < 1)) throw Error("flow: t must lie in (0, 1), got " + std::to_string(t[n]));
    for (std::size_t i = n * S; i < (n + 1) * S; ++i)
      out[i] = static_cast<T>((1 - t[n]) * double(x0[i]) + t[n] * double(eps[i]));
  }
  return out;
}

/// mean ||(eps - x0) - u_pred||^2.
template <class T>
Var<T> flow_loss_terms(Var<T> u_pred, const Tensor<T>& x0, const Tensor<T>& eps) {
  if (u_pred.shape() != x0.shape()) throw ShapeError("flow loss: prediction " + shape_str(u_pred.shape()));
  Tensor<T> target(x0.shape());
  for (std::size_t i = 0; i < x0.numel(); ++i) target[i] = eps[i] - x0[i];
  return ops::mean_all(ops::square(ops::sub(u_pred.tape->constant(std::move(target)), u_pred)));
}

/// Flow-matching loss on a clean batch with t and eps drawn from `rng`.
template <class T>
LossTerms<T> flow_matching_loss(Binder<T>& p, const FcdmConfig& cfg, const Tensor<T>& x0,
                                const std::vector<std::size_t>& y, Rng& rng) {
  if (cfg.learn_sigma) throw ConfigError("flow matching needs learn_sigma = false");
  const auto t = sample_flow_times(x0.dim(0), rng);
  const Tensor<T> eps = randn<T>(rng, x0.shape());
  std::vector<double> tin(t.size());
  for (std::size_t n = 0; n < t.size(); ++n) tin[n] = flow_model_time(t[n]);
  auto out = forward(p, cfg, p.tape().constant(flow_interpolate(x0, eps, t)), tin, y);
  Var<T> loss = flow_loss_terms(out.eps, x0, eps);
  return {loss, double(loss.value().item()), 0, std::nullopt};
}

struct EulerOptions {
  std::size_t steps = 250;
  double last_step = 0.04;
  Guidance guidance;
  std::size_t null_label = 0;
};

/// Time grid from 1 to 0: steps - 1 uniform steps over [last_step, 1], then a
/// final step of size last_step. A single step spans the whole interval.
inline std::vector<double> euler_grid(std::size_t steps, double last_step) {
  if (steps < 1) throw Error("euler: steps must be >= 1");
  if (steps == 1) return {1.0, 0.0};
  if (!(last_step > 0 && last_step < 1)) throw Error("euler: last_step must lie in (0, 1)");
  std::vector<double> g(steps + 1);
  const double h = (1 - last_step) / double(steps - 1);
  for (std::size_t i = 0; i < steps; ++i) g[i] = 1 - h * double(i);
  g[steps - 1] = last_step;
  g[steps] = 0;
  return g;
}

/// Deterministic Euler integration of dx/dt = u(x, t) from t = 1 to 0,
/// starting at `x1`.
template <class T>
Tensor<T> euler_sample(const PredictFn<T>& f, Tensor<T> x1, const std::vector<std::size_t>& y,
                       const EulerOptions& opt) {
  if (!(opt.guidance.scale >= 0) || !std::isfinite(opt.guidance.scale))
    throw Error("euler: guidance scale must be finite and >= 0");
  const auto grid = euler_grid(opt.steps, opt.last_step);
  const std::size_t N = x1.dim(0);
  for (std::size_t i = 0; i + 1 < grid.size(); ++i) {
    const double dt = grid[i] - grid[i + 1];
    const std::vector<double> tin(N, flow_model_time(grid[i]));
    const Prediction<T> u = detail::guided(f, x1, tin, y, opt.guidance, opt.null_label);
    for (std::size_t k = 0; k < x1.numel(); ++k) x1[k] = static_cast<T>(double(x1[k]) - dt * double(u.eps[k]));
  }
  return x1;
}

template <class T>
Tensor<T> euler_sample(const PredictFn<T>& f, const Shape& shape, const std::vector<std::size_t>& y,
                       const EulerOptions& opt, Rng& rng) {
  return euler_sample(f, randn<T>(rng, shape), y, opt);
}

}  // namespace fcdm
