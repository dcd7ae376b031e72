#include <gtest/gtest.h>

#include <cmath>

#include "fcdm/cost.hpp"
#include "fcdm/gradcheck.hpp"
#include "fcdm/model.hpp"

using namespace fcdm;
namespace O = fcdm::ops;

namespace {

using Map = Tensor<double>;

Map conv_oracle(const Map& x, const Map& w, const Map& b, std::size_t groups) {
  const std::size_t N = x.dim(0), C = x.dim(1), H = x.dim(2), W = x.dim(3);
  const std::size_t Co = w.dim(0), cg = w.dim(1), k = w.dim(2), pad = k / 2, og = Co / groups;
  Map y({N, Co, H, W});
  for (std::size_t n = 0; n < N; ++n)
    for (std::size_t o = 0; o < Co; ++o)
      for (std::size_t h = 0; h < H; ++h)
        for (std::size_t v = 0; v < W; ++v) {
          double s = b[o];
          for (std::size_t ci = 0; ci < cg; ++ci)
            for (std::size_t i = 0; i < k; ++i)
              for (std::size_t j = 0; j < k; ++j) {
                const long hh = long(h + i) - long(pad), ww = long(v + j) - long(pad);
                if (hh < 0 || ww < 0 || hh >= long(H) || ww >= long(W)) continue;
                s += w[((o * cg + ci) * k + i) * k + j] * x.at(n, (o / og) * cg + ci, hh, ww);
              }
          y.at(n, o, h, v) = s;
        }
  (void)C;
  return y;
}

Map ln_oracle(const Map& x) {
  Map y(x.shape());
  const std::size_t C = x.dim(1);
  for (std::size_t n = 0; n < x.dim(0); ++n)
    for (std::size_t h = 0; h < x.dim(2); ++h)
      for (std::size_t w = 0; w < x.dim(3); ++w) {
        double m = 0, v = 0;
        for (std::size_t c = 0; c < C; ++c) m += x.at(n, c, h, w) / C;
        for (std::size_t c = 0; c < C; ++c) v += (x.at(n, c, h, w) - m) * (x.at(n, c, h, w) - m) / C;
        for (std::size_t c = 0; c < C; ++c) y.at(n, c, h, w) = (x.at(n, c, h, w) - m) / std::sqrt(v + 1e-6);
      }
  return y;
}

double gelu(double v) { return 0.5 * v * (1 + std::erf(v / std::sqrt(2.0))); }
double silu(double v) { return v / (1 + std::exp(-v)); }

/// Reference block evaluated with plain loops on a single sample.
Map block_oracle(const ParamStore<double>& ps, const FcdmConfig& cfg, const std::string& name, const Map& x,
                 const Map& stage_cond) {
  const std::size_t c = x.dim(1), H = x.dim(2), W = x.dim(3);
  std::vector<double> mod(3 * c);
  const auto& aw = ps[name + ".ada.w"];
  const auto& ab = ps[name + ".ada.b"];
  for (std::size_t o = 0; o < 3 * c; ++o) {
    double s = ab[o];
    for (std::size_t i = 0; i < c; ++i) s += aw[o * c + i] * silu(stage_cond[i]);
    mod[o] = s;
  }
  auto modulate = [&](const Map& h) {
    Map n = ln_oracle(h);
    for (std::size_t ch = 0; ch < c; ++ch)
      for (std::size_t i = 0; i < H * W; ++i) n[ch * H * W + i] = n[ch * H * W + i] * (1 + mod[ch]) + mod[c + ch];
    return n;
  };
  Map h;
  if (cfg.block_variant == "resnet") {
    h = conv_oracle(modulate(x), ps[name + ".conv1.w"], ps[name + ".conv1.b"], 1);
    for (auto& v : h.values()) v = gelu(v);
    h = conv_oracle(h, ps[name + ".conv2.w"], ps[name + ".conv2.b"], 1);
  } else {
    h = conv_oracle(x, ps[name + ".dw.w"], ps[name + ".dw.b"], c);
    h = conv_oracle(modulate(h), ps[name + ".pw1.w"], ps[name + ".pw1.b"], 1);
    for (auto& v : h.values()) v = gelu(v);
    const std::size_t rc = h.dim(1), P = H * W;
    if (cfg.channel_norm == "grn") {
      const auto& g = ps[name + ".grn.gamma"];
      const auto& b = ps[name + ".grn.beta"];
      std::vector<double> gn(rc);
      double mean = 0;
      for (std::size_t ch = 0; ch < rc; ++ch) {
        double s = 0;
        for (std::size_t i = 0; i < P; ++i) s += h[ch * P + i] * h[ch * P + i];
        gn[ch] = std::sqrt(s);
        mean += gn[ch] / rc;
      }
      for (std::size_t ch = 0; ch < rc; ++ch)
        for (std::size_t i = 0; i < P; ++i) {
          double& v = h[ch * P + i];
          v = g[ch] * v * gn[ch] / (mean + 1e-6) + b[ch] + v;
        }
    }
    h = conv_oracle(h, ps[name + ".pw2.w"], ps[name + ".pw2.b"], 1);
  }
  Map out = x;
  for (std::size_t ch = 0; ch < c; ++ch)
    for (std::size_t i = 0; i < H * W; ++i) out[ch * H * W + i] += mod[2 * c + ch] * h[ch * H * W + i];
  return out;
}

/// Block parameters at their initial scale, with the zero-initialized
/// tensors (modulation, biases, GRN learnables) replaced by small noise.
ParamStore<double> random_block(const FcdmConfig& cfg, const std::string& name, std::size_t c, Rng& rng) {
  ParamStore<double> ps;
  declare_fcdm_block(ps, cfg, name, c, rng);
  for (auto& t : ps.tensors()) {
    bool zero = true;
    for (double v : t.values()) zero = zero && v == 0;
    if (!zero) continue;
    t = randn<double>(rng, t.shape());
    for (auto& v : t.values()) v *= 0.3;
  }
  return ps;
}

FcdmConfig small_cfg() {
  FcdmConfig cfg;
  cfg.base_channels = 8;
  cfg.base_blocks = 1;
  cfg.in_channels = 3;
  cfg.input_resolution = 8;
  cfg.num_classes = 4;
  cfg.freq_dim = 16;
  return cfg;
}

}  // namespace

TEST(Config, PresetDepthsAndChannels) {
  auto s = model_preset("fcdm-s");
  EXPECT_EQ(s.stage_depths(), (std::vector<std::size_t>{2, 4, 8, 4, 2}));
  EXPECT_EQ(s.stage_channels(), (std::vector<std::size_t>{128, 256, 512, 256, 128}));
  EXPECT_EQ(model_preset("fcdm-xl").stage_depths(), (std::vector<std::size_t>{3, 6, 12, 6, 3}));
  EXPECT_THROW(model_preset("fcdm-q"), ConfigError);
}

TEST(Config, ValidationNamesField) {
  FcdmConfig c;
  c.kernel_size = 4;
  try {
    c.validate();
    FAIL();
  } catch (const ConfigError& e) {
    EXPECT_NE(std::string(e.what()).find("kernel_size"), std::string::npos);
  }
  c = FcdmConfig{};
  c.input_resolution = 30;
  EXPECT_THROW(c.validate(), ConfigError);
  c = FcdmConfig{};
  c.depths = {1, 2};
  EXPECT_THROW(c.validate(), ConfigError);
}

TEST(Config, JsonRoundTripAndUnknownKeys) {
  FcdmConfig c = model_preset("fcdm-toy");
  c.channel_norm = "cca";
  json j = c;
  EXPECT_EQ(j.get<FcdmConfig>(), c);
  j["bogus"] = 1;
  try {
    (void)j.get<FcdmConfig>();
    FAIL();
  } catch (const ConfigError& e) {
    EXPECT_NE(std::string(e.what()).find("bogus"), std::string::npos);
  }
}

TEST(Block, MatchesScalarOracle) {
  for (const std::string variant : {"fcdm", "resnet"}) {
    FcdmConfig cfg = small_cfg();
    cfg.block_variant = variant;
    Rng rng(21);
    auto ps = random_block(cfg, "b", 8, rng);
    auto x = randn<double>(rng, {1, 8, 4, 4});
    auto sc = randn<double>(rng, {1, 8});
    Tape<double> tape;
    Binder<double> p(tape, ps);
    auto y = fcdm_block(p, cfg, "b", tape.constant(x), tape.constant(sc)).value();
    EXPECT_LT(max_abs_diff(y, block_oracle(ps, cfg, "b", x, sc)), 1e-5) << variant;
  }
}

TEST(Block, ZeroInitIdentityAndShape) {
  for (const std::string variant : {"fcdm", "resnet"}) {
    for (const bool ff : {false, true}) {
      FcdmConfig cfg = small_cfg();
      cfg.block_variant = variant;
      cfg.use_feedforward = ff;
      Rng rng(22);
      ParamStore<float> ps;
      declare_fcdm_block(ps, cfg, "b", 8, rng);
      auto x = randn<float>(rng, {2, 8, 4, 4});
      Tape<float> tape;
      Binder<float> p(tape, ps);
      auto y = fcdm_block(p, cfg, "b", tape.constant(x), tape.constant(randn<float>(rng, {2, 8}))).value();
      EXPECT_TRUE(bit_identical(y, x)) << variant << " ff=" << ff;
    }
  }
}

template <class T>
Var<T> bound_block(Tape<T>& tape, const FcdmConfig& cfg, const ParamStore<double>& shapes, const std::vector<Var<T>>& v) {
  const ParamStore<T> local = shapes.cast<T>();
  Binder<T> p(tape, local);
  for (std::size_t i = 0; i < local.size(); ++i) p.bind(local.names()[i], v[i + 2]);
  return fcdm_block(p, cfg, "b", v[0], v[1]);
}

TEST(GradCheck, Blocks) {
  const GradCheckOptions opt{.h = 1e-3};
  struct Variant {
    std::string block, norm;
    bool ff;
  };
  for (const Variant& v : {Variant{"fcdm", "grn", false}, Variant{"fcdm", "cca", true}, Variant{"fcdm", "none", false},
                           Variant{"resnet", "grn", false}}) {
    FcdmConfig cfg = small_cfg();
    cfg.block_variant = v.block;
    cfg.channel_norm = v.norm;
    cfg.use_feedforward = v.ff;
    Rng rng(23);
    auto ps = random_block(cfg, "b", 8, rng);
    std::vector<Tensor<double>> in{randn<double>(rng, {1, 8, 4, 4}), randn<double>(rng, {1, 8})};
    for (const auto& t : ps.tensors()) in.push_back(t);
    auto f = [&](auto& tape, const auto& vars) { return bound_block(tape, cfg, ps, vars); };
    const std::string what = v.block + "/" + v.norm + (v.ff ? "/ff" : "");
    const auto r = gradcheck<double>(f, in, opt);
    EXPECT_LT(r.max_rel_err, 1e-5) << what << " input " << r.worst_input << " entry " << r.worst_index;
    std::vector<Tensor<float>> in32;
    for (auto& x : in) in32.push_back(x.cast<float>());
    const auto r32 = gradcheck_f32(f, in32, {.h = 1e-3, .scale_floor = 1e-3});
    EXPECT_LT(r32.max_rel_err, 1e-3) << what << " input " << r32.worst_input << " entry " << r32.worst_index;
  }
}

TEST(Model, FreshModelPredictsZeroAndBlocksAreIdentity) {
  for (const std::string norm : {"grn", "cca", "none"}) {
    FcdmConfig cfg = small_cfg();
    cfg.channel_norm = norm;
    Rng rng(31);
    auto m = build_model<float>(cfg, rng);
    auto x = randn<float>(rng, {2, 3, 8, 8});
    std::size_t blocks = 0;
    bool identity = true;
    Probe<float> probe;
    probe.on_block = [&](std::size_t, std::size_t, const Tensor<float>& in, const Tensor<float>& out) {
      ++blocks;
      identity = identity && bit_identical(in, out);
    };
    auto out = predict(m, x, {3.0, 70.0}, {1, 4}, &probe);
    EXPECT_EQ(blocks, 10u);
    EXPECT_TRUE(identity);
    for (float v : out.eps.values()) EXPECT_EQ(v, 0.0f);
    ASSERT_TRUE(out.v.has_value());
    for (float v : out.v->values()) EXPECT_EQ(v, 0.5f);
  }
}

TEST(Model, IsotropicKeepsResolution) {
  FcdmConfig cfg = small_cfg();
  cfg.isotropic = true;
  EXPECT_EQ(cfg.stage_depths(), (std::vector<std::size_t>{10}));
  Rng rng(32);
  auto m = build_model<float>(cfg, rng);
  Probe<float> probe;
  probe.on_block = [](std::size_t, std::size_t, const Tensor<float>& in, const Tensor<float>& out) {
    EXPECT_EQ(in.shape(), (Shape{1, 8, 8, 8}));
    EXPECT_EQ(out.shape(), in.shape());
  };
  auto out = predict(m, randn<float>(rng, {1, 3, 8, 8}), {5.0}, {0}, &probe);
  EXPECT_EQ(out.eps.shape(), (Shape{1, 3, 8, 8}));
}

TEST(Model, RejectsBadInputs) {
  FcdmConfig cfg = small_cfg();
  Rng rng(33);
  auto m = build_model<float>(cfg, rng);
  EXPECT_THROW(predict(m, Tensor<float>({1, 3, 4, 4}), {1.0}, {0}), ShapeError);
  EXPECT_THROW(predict(m, Tensor<float>({1, 3, 8, 8}), {1.0}, {5}), Error);
  EXPECT_THROW(predict(m, Tensor<float>({2, 3, 8, 8}), {1.0}, {0}), ShapeError);
}

namespace {

/// Model whose zero-initialized tensors are filled with small noise so every
/// path carries signal.
template <class T>
Model<T> perturbed_model(const FcdmConfig& cfg, std::uint64_t seed) {
  Rng rng(seed);
  auto m = build_model<T>(cfg, rng);
  for (auto& t : m.params.tensors()) {
    bool zero = true;
    for (T v : t.values()) zero = zero && v == T(0);
    if (!zero) continue;
    t = randn<T>(rng, t.shape());
    for (auto& v : t.values()) v = static_cast<T>(v * 0.2);
  }
  return m;
}

}  // namespace

TEST(Model, DeterministicAndBatchPermutationEquivariant) {
  FcdmConfig cfg = small_cfg();
  auto m = perturbed_model<float>(cfg, 34);
  auto m2 = perturbed_model<float>(cfg, 34);
  EXPECT_EQ(m.params.checksum(), m2.params.checksum());
  Rng rng(35);
  auto x = randn<float>(rng, {3, 3, 8, 8});
  const std::vector<double> t{1.0, 50.0, 99.0};
  const std::vector<std::size_t> y{0, 2, 4};
  auto a = predict(m, x, t, y);
  auto b = predict(m2, x, t, y);
  EXPECT_TRUE(bit_identical(a.eps, b.eps));

  const std::size_t perm[3] = {2, 0, 1};
  Tensor<float> xp(x.shape());
  std::vector<double> tp(3);
  std::vector<std::size_t> yp(3);
  const std::size_t S = 3 * 64;
  for (std::size_t i = 0; i < 3; ++i) {
    std::copy_n(x.data() + perm[i] * S, S, xp.data() + i * S);
    tp[i] = t[perm[i]];
    yp[i] = y[perm[i]];
  }
  auto c = predict(m, xp, tp, yp);
  for (std::size_t i = 0; i < 3; ++i)
    for (std::size_t j = 0; j < S; ++j) {
      EXPECT_NEAR(c.eps[i * S + j], a.eps[perm[i] * S + j], 1e-5);
      EXPECT_NEAR((*c.v)[i * S + j], (*a.v)[perm[i] * S + j], 1e-5);
    }
}

TEST(Model, AnalyticParamCountMatchesBuiltModel) {
  std::vector<FcdmConfig> cfgs;
  for (const std::string& name : model_preset_names()) {
    FcdmConfig c = model_preset(name);
    if (name != "fcdm-toy") {
      c.base_channels /= 16;  // same structure, small enough to allocate
      c.num_classes = 10;
    }
    cfgs.push_back(c);
  }
  FcdmConfig c = small_cfg();
  c.block_variant = "resnet";
  cfgs.push_back(c);
  c = small_cfg();
  c.channel_norm = "cca";
  c.use_feedforward = true;
  c.use_inverted_bottleneck = false;
  c.kernel_size = 3;
  cfgs.push_back(c);
  c = small_cfg();
  c.isotropic = true;
  c.skip_fusion = "add";
  cfgs.push_back(c);
  c = small_cfg();
  c.depths = {1, 3, 2, 1, 1};
  c.skip_fusion = "add";
  c.learn_sigma = false;
  cfgs.push_back(c);
  for (const auto& cfg : cfgs) {
    Rng rng(36);
    auto m = build_model<float>(cfg, rng);
    EXPECT_EQ(param_count(cfg), m.params.numel()) << json(cfg).dump();
  }
}

TEST(Model, AnalyticMacsMatchTape) {
  // The tape counts conv, linear and matmul MACs.
  FcdmConfig cfg = small_cfg();
  Rng rng(37);
  auto m = build_model<double>(cfg, rng);
  Tape<double> tape;
  Binder<double> p(tape, m.params);
  forward(p, cfg, tape.constant(randn<double>(rng, {1, 3, 8, 8})), {4.0}, {1});
  const auto report = flops_fcdm(cfg);
  EXPECT_EQ(tape.macs(), report.macs_of_kind("conv") + report.macs_of_kind("linear"));
}

TEST(GradCheck, ToyModel) {
  FcdmConfig cfg = model_preset("fcdm-toy");
  cfg.base_channels = 8;
  cfg.freq_dim = 16;
  auto m = perturbed_model<double>(cfg, 38);
  Rng rng(39);
  std::vector<Tensor<double>> in{randn<double>(rng, {2, 3, 8, 8})};
  for (const auto& t : m.params.tensors()) in.push_back(t);
  auto f = [&](auto& tape, const auto& vars) {
    using T = typename std::decay_t<decltype(vars[0])>::value_type;
    const ParamStore<T> local = m.params.template cast<T>();
    Binder<T> p(tape, local);
    for (std::size_t i = 0; i < local.size(); ++i) p.bind(local.names()[i], vars[i + 1]);
    auto out = forward(p, cfg, vars[0], {7.0, 60.0}, {1, 4});
    return ops::concat_channels<T>({out.eps, *out.v});
  };
  const GradCheckOptions opt{.h = 1e-3, .max_entries = 6, .seed = 1};
  const auto r = gradcheck<double>(f, in, opt);
  EXPECT_LT(r.max_rel_err, 1e-5) << "input " << r.worst_input << " entry " << r.worst_index;
  std::vector<Tensor<float>> in32;
  for (auto& x : in) in32.push_back(x.cast<float>());
  GradCheckOptions o32 = opt;
  o32.scale_floor = 1e-3;
  const auto r32 = gradcheck_f32(f, in32, o32);
  EXPECT_LT(r32.max_rel_err, 1e-3) << "input " << r32.worst_input << " entry " << r32.worst_index;
}
