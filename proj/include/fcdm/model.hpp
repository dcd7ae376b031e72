#pragma once

#include <functional>
#include <optional>
#include <string>
#include <vector>

#include "fcdm/config.hpp"
#include "fcdm/layers.hpp"

namespace fcdm {

/// Observers for intermediate activations during a forward pass.
template <class T>
struct Probe {
  std::function<void(std::size_t stage, std::size_t block, const Tensor<T>& in, const Tensor<T>& out)> on_block;
  std::function<void(std::size_t stage, std::size_t block, const Tensor<T>& pre, const Tensor<T>& post)> on_grn;
};

template <class T>
struct ModelOutput {
  Var<T> eps;
  /// Interpolation weight in [0, 1]; present when learn_sigma is set.
  std::optional<Var<T>> v;
};

template <class T>
struct Model {
  FcdmConfig cfg;
  ParamStore<T> params;
};

// ---------------------------------------------------------------------------
// Blocks

template <class T>
void declare_fcdm_block(ParamStore<T>& ps, const FcdmConfig& cfg, const std::string& name, std::size_t c, Rng& rng) {
  const std::size_t rc = cfg.ratio() * c;
  if (cfg.block_variant == "resnet") {
    declare_linear(ps, name + ".ada", c, 3 * c, rng, true);
    declare_conv(ps, name + ".conv1", c, c, 3, rng);
    declare_conv(ps, name + ".conv2", c, c, 3, rng);
    return;
  }
  declare_conv(ps, name + ".dw", c, c, cfg.kernel_size, rng, c);
  declare_linear(ps, name + ".ada", c, 3 * c, rng, true);
  declare_conv(ps, name + ".pw1", c, rc, 1, rng);
  if (cfg.channel_norm == "grn") declare_grn(ps, name + ".grn", rc);
  if (cfg.channel_norm == "cca") declare_conv(ps, name + ".cca", rc, rc, 1, rng);
  declare_conv(ps, name + ".pw2", rc, c, 1, rng);
  if (cfg.use_feedforward) {
    declare_linear(ps, name + ".ff_ada", c, 3 * c, rng, true);
    declare_conv(ps, name + ".ff1", c, rc, 1, rng);
    declare_conv(ps, name + ".ff2", rc, c, 1, rng);
  }
}

/// Conditional block on x [N,c,H,W] with stage conditioning [N,c]:
/// depthwise conv -> AdaLN -> pointwise expand -> GELU -> GRN/CCA ->
/// pointwise reduce, gated by alpha and added to x.
template <class T>
Var<T> fcdm_block(Binder<T>& p, const FcdmConfig& cfg, const std::string& name, Var<T> x, Var<T> stage_cond,
                  const std::function<void(const Tensor<T>&, const Tensor<T>&)>& on_grn = nullptr) {
  const Var<T> cond = ops::silu(stage_cond);
  if (cfg.block_variant == "resnet") {
    auto m = split_modulation(linear(p, name + ".ada", cond));
    Var<T> h = ada_layer_norm(x, m.gamma, m.beta);
    h = conv(p, name + ".conv2", ops::gelu(conv(p, name + ".conv1", h)));
    return ops::add(x, ops::mul(h, m.alpha));
  }
  auto m = split_modulation(linear(p, name + ".ada", cond));
  Var<T> h = conv(p, name + ".dw", x, {.stride = 1, .padding = std::nullopt, .groups = x.dim(1)});
  h = ada_layer_norm(h, m.gamma, m.beta);
  h = ops::gelu(conv(p, name + ".pw1", h));
  if (cfg.channel_norm == "grn") {
    Var<T> post = grn(p, name + ".grn", h);
    if (on_grn) on_grn(h.value(), post.value());
    h = post;
  } else if (cfg.channel_norm == "cca") {
    h = cca(p, name + ".cca", h);
  }
  h = conv(p, name + ".pw2", h);
  Var<T> out = ops::add(x, ops::mul(h, m.alpha));
  if (cfg.use_feedforward) {
    auto f = split_modulation(linear(p, name + ".ff_ada", cond));
    Var<T> g = ada_layer_norm(out, f.gamma, f.beta);
    g = conv(p, name + ".ff2", ops::gelu(conv(p, name + ".ff1", g)));
    out = ops::add(out, ops::mul(g, f.alpha));
  }
  return out;
}

// ---------------------------------------------------------------------------
// Model

template <class T>
Model<T> build_model(const FcdmConfig& cfg, Rng& rng) {
  cfg.validate();
  Model<T> m{cfg, {}};
  ParamStore<T>& ps = m.params;
  const std::size_t C = cfg.base_channels, D = cfg.d_cond();
  declare_linear(ps, "t_embed.fc1", cfg.freq_dim, D, rng, false, 0.02);
  declare_linear(ps, "t_embed.fc2", D, D, rng, false, 0.02);
  {
    Tensor<T> table = randn<T>(rng, {cfg.num_classes + 1, D});
    for (auto& v : table.values()) v = static_cast<T>(v * 0.02);
    ps.add("y_embed.table", std::move(table));
  }
  declare_conv(ps, "stem", cfg.in_channels, C, 3, rng);
  const auto depths = cfg.stage_depths();
  const auto chans = cfg.stage_channels();
  const auto res = cfg.stage_resolutions();
  const std::size_t nd = cfg.isotropic ? 0 : cfg.num_downsamples;
  for (std::size_t i = 0; i < cfg.num_stages(); ++i) {
    const std::size_t c = chans[i];
    if (i > nd) {
      const std::size_t j = 2 * nd - i;  // encoder stage providing the skip
      if (res[j] != res[i] || chans[j] != c)
        throw Error("build_model: skip from stage " + std::to_string(j) + " does not match stage " +
                    std::to_string(i));
      declare_upsample(ps, "up" + std::to_string(i), chans[i - 1], cfg.upsample_kernel, rng);
      if (cfg.skip_fusion == "concat") declare_conv(ps, "fuse" + std::to_string(i), 2 * c, c, cfg.fusion_kernel, rng);
    }
    declare_linear(ps, stage_name(i) + ".cond", D, c, rng);
    for (std::size_t b = 0; b < depths[i]; ++b) declare_fcdm_block(ps, cfg, block_name(i, b), c, rng);
    if (i < nd) declare_downsample(ps, "down" + std::to_string(i), c, rng);
  }
  declare_norm_affine(ps, "head.norm", chans.back());
  declare_conv(ps, "head.conv", chans.back(), cfg.out_channels(), 3, rng, 1, true);
  return m;
}

/// Global conditioning vector [N, D]: timestep MLP plus class embedding.
template <class T>
Var<T> condition(Binder<T>& p, const FcdmConfig& cfg, const std::vector<double>& t, const std::vector<std::size_t>& y) {
  Var<T> te = timestep_embedding(p, "t_embed", t, cfg.freq_dim);
  return ops::add(te, class_embedding(p, "y_embed", y, cfg.num_classes));
}

/// x [N, in, H, W]; t per-sample timestep values fed to the sinusoid; y labels
/// in [0, num_classes] where num_classes is the null label.
template <class T>
ModelOutput<T> forward(Binder<T>& p, const FcdmConfig& cfg, Var<T> x, const std::vector<double>& t,
                       const std::vector<std::size_t>& y, const Probe<T>* probe = nullptr) {
  const Shape& s = x.shape();
  if (s.size() != 4 || s[1] != cfg.in_channels || s[2] != cfg.input_resolution || s[3] != cfg.input_resolution)
    throw ShapeError("forward: expected [N," + std::to_string(cfg.in_channels) + "," +
                     std::to_string(cfg.input_resolution) + "," + std::to_string(cfg.input_resolution) + "], got " +
                     shape_str(s));
  if (t.size() != s[0] || y.size() != s[0])
    throw ShapeError("forward: batch " + std::to_string(s[0]) + " with " + std::to_string(t.size()) +
                     " timesteps and " + std::to_string(y.size()) + " labels");
  const Var<T> cond = ops::silu(condition(p, cfg, t, y));
  const auto depths = cfg.stage_depths();
  const std::size_t nd = cfg.isotropic ? 0 : cfg.num_downsamples;
  std::vector<Var<T>> skips;
  Var<T> h = conv(p, "stem", x);
  for (std::size_t i = 0; i < cfg.num_stages(); ++i) {
    if (i > nd) {
      Var<T> up = upsample(p, "up" + std::to_string(i), h);
      Var<T> skip = skips[2 * nd - i];
      if (up.shape() != skip.shape())
        throw ShapeError("forward: decoder stage " + std::to_string(i) + " got " + shape_str(up.shape()) +
                         " but skip is " + shape_str(skip.shape()));
      h = cfg.skip_fusion == "concat" ? conv(p, "fuse" + std::to_string(i), ops::concat_channels<T>({up, skip}))
                                      : ops::add(up, skip);
    }
    const Var<T> stage_cond = linear(p, stage_name(i) + ".cond", cond);
    for (std::size_t b = 0; b < depths[i]; ++b) {
      std::function<void(const Tensor<T>&, const Tensor<T>&)> grn_hook;
      if (probe && probe->on_grn)
        grn_hook = [&, i, b](const Tensor<T>& pre, const Tensor<T>& post) { probe->on_grn(i, b, pre, post); };
      Var<T> out = fcdm_block(p, cfg, block_name(i, b), h, stage_cond, grn_hook);
      if (probe && probe->on_block) probe->on_block(i, b, h.value(), out.value());
      h = out;
    }
    if (i < nd) {
      skips.push_back(h);
      h = downsample(p, "down" + std::to_string(i), h);
    }
  }
  Var<T> out = conv(p, "head.conv", layer_norm_affine(p, "head.norm", h));
  if (!cfg.learn_sigma) return {out, std::nullopt};
  Var<T> eps = ops::slice_channels(out, 0, cfg.in_channels);
  Var<T> raw = ops::slice_channels(out, cfg.in_channels, cfg.in_channels);
  Var<T> v = ops::mul_scalar(ops::add_scalar(ops::clamp(raw, T(-1), T(1)), T(1)), T(0.5));
  return {eps, v};
}

template <class T>
struct Prediction {
  Tensor<T> eps;
  std::optional<Tensor<T>> v;
};

/// Inference-only forward on plain tensors.
template <class T>
Prediction<T> predict(const Model<T>& m, const Tensor<T>& x, const std::vector<double>& t,
                      const std::vector<std::size_t>& y, const Probe<T>* probe = nullptr) {
  Tape<T> tape;
  tape.set_grad_enabled(false);
  Binder<T> p(tape, m.params, false);
  auto out = forward(p, m.cfg, tape.constant(x), t, y, probe);
  Prediction<T> r{out.eps.value(), std::nullopt};
  if (out.v) r.v = out.v->value();
  return r;
}

}  // namespace fcdm
