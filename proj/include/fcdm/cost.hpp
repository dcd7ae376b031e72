#pragma once

#include <cmath>
#include <cstdint>
#include <functional>
#include <string>
#include <vector>

#include "fcdm/config.hpp"

namespace fcdm {

/// One layer of an analytic cost breakdown.
struct CostRow {
  std::string name;
  std::string kind;  // conv | linear | elementwise | table | attention
  std::uint64_t params = 0;
  std::uint64_t macs = 0;
};

enum class CountConvention { Macs, Flops };

inline const char* convention_name(CountConvention c) { return c == CountConvention::Macs ? "macs" : "flops"; }

struct CostReport {
  std::string model;
  std::size_t resolution = 0;  // pixel resolution the cost refers to
  CountConvention convention = CountConvention::Macs;
  std::vector<CostRow> rows;
  json config;

  std::uint64_t total_params() const {
    std::uint64_t n = 0;
    for (const auto& r : rows) n += r.params;
    return n;
  }
  std::uint64_t total_macs() const {
    std::uint64_t n = 0;
    for (const auto& r : rows) n += r.macs;
    return n;
  }
  /// Total compute under the report's convention.
  double total_compute() const {
    return static_cast<double>(total_macs()) * (convention == CountConvention::Flops ? 2.0 : 1.0);
  }
  /// Parameters of rows whose name starts with `prefix`.
  std::uint64_t params_with_prefix(const std::string& prefix) const {
    std::uint64_t n = 0;
    for (const auto& r : rows)
      if (r.name.rfind(prefix, 0) == 0) n += r.params;
    return n;
  }
  std::uint64_t macs_of_kind(const std::string& kind) const {
    std::uint64_t n = 0;
    for (const auto& r : rows)
      if (r.kind == kind) n += r.macs;
    return n;
  }
  std::uint64_t macs_with_prefix(const std::string& prefix) const {
    std::uint64_t n = 0;
    for (const auto& r : rows)
      if (r.name.rfind(prefix, 0) == 0) n += r.macs;
    return n;
  }

  std::string csv() const {
    std::string s = "name,kind,params,macs\n";
    for (const auto& r : rows)
      s += r.name + "," + r.kind + "," + std::to_string(r.params) + "," + std::to_string(r.macs) + "\n";
    s += "total,," + std::to_string(total_params()) + "," + std::to_string(total_macs()) + "\n";
    return s;
  }

  json to_json() const {
    json rs = json::array();
    for (const auto& r : rows) rs.push_back({{"name", r.name}, {"kind", r.kind}, {"params", r.params}, {"macs", r.macs}});
    return json{{"model", model},
                {"resolution", resolution},
                {"convention", convention_name(convention)},
                {"total_params", total_params()},
                {"total_macs", total_macs()},
                {"total_compute", total_compute()},
                {"elementwise_rule", "norms, activations, modulation and gates count 1 mac per output element"},
                {"rows", rs},
                {"config", config}};
  }
};

namespace detail {

struct CostBuilder {
  std::vector<CostRow> rows;

  void add(const std::string& name, const char* kind, std::uint64_t params, std::uint64_t macs) {
    rows.push_back({name, kind, params, macs});
  }

  /// k x k conv, cin -> cout with groups, bias, output hw positions.
  void conv(const std::string& name, std::uint64_t cin, std::uint64_t cout, std::uint64_t k, std::uint64_t hw,
            std::uint64_t groups = 1) {
    add(name, "conv", k * k * (cin / groups) * cout + cout, k * k * (cin / groups) * cout * hw);
  }
  void linear(const std::string& name, std::uint64_t in, std::uint64_t out) {
    add(name, "linear", in * out + out, in * out);
  }
  void elementwise(const std::string& name, std::uint64_t elements, std::uint64_t params = 0) {
    add(name, "elementwise", params, elements);
  }
};

inline void block_cost(CostBuilder& cb, const FcdmConfig& cfg, const std::string& name, std::uint64_t c,
                       std::uint64_t hw) {
  const std::uint64_t rc = cfg.ratio() * c;
  cb.elementwise(name + ".ada_silu", c);
  cb.linear(name + ".ada", c, 3 * c);
  if (cfg.block_variant == "resnet") {
    cb.elementwise(name + ".norm", c * hw);
    cb.elementwise(name + ".modulate", c * hw);
    cb.conv(name + ".conv1", c, c, 3, hw);
    cb.elementwise(name + ".gelu", c * hw);
    cb.conv(name + ".conv2", c, c, 3, hw);
    cb.elementwise(name + ".gate", c * hw);
    return;
  }
  cb.conv(name + ".dw", c, c, cfg.kernel_size, hw, c);
  cb.elementwise(name + ".norm", c * hw);
  cb.elementwise(name + ".modulate", c * hw);
  cb.conv(name + ".pw1", c, rc, 1, hw);
  cb.elementwise(name + ".gelu", rc * hw);
  if (cfg.channel_norm == "grn") cb.elementwise(name + ".grn", rc * hw, 2 * rc);
  if (cfg.channel_norm == "cca") {
    cb.elementwise(name + ".cca_pool", rc * hw);
    cb.conv(name + ".cca", rc, rc, 1, 1);
    cb.elementwise(name + ".cca_gate", rc * hw);
  }
  cb.conv(name + ".pw2", rc, c, 1, hw);
  cb.elementwise(name + ".gate", c * hw);
  if (cfg.use_feedforward) {
    cb.linear(name + ".ff_ada", c, 3 * c);
    cb.elementwise(name + ".ff_norm", c * hw);
    cb.elementwise(name + ".ff_modulate", c * hw);
    cb.conv(name + ".ff1", c, rc, 1, hw);
    cb.elementwise(name + ".ff_gelu", rc * hw);
    cb.conv(name + ".ff2", rc, c, 1, hw);
    cb.elementwise(name + ".ff_gate", c * hw);
  }
}

}  // namespace detail

/// Analytic per-sample cost of one forward pass at the configured input
/// resolution. `pixel_resolution` only labels the report (latent models run
/// at pixel/8).
inline CostReport flops_fcdm(const FcdmConfig& cfg, std::size_t pixel_resolution = 0,
                             CountConvention convention = CountConvention::Macs) {
  cfg.validate();
  detail::CostBuilder cb;
  const std::uint64_t C = cfg.base_channels, D = cfg.d_cond();
  const std::uint64_t in = cfg.in_channels;
  cb.linear("t_embed.fc1", cfg.freq_dim, D);
  cb.elementwise("t_embed.silu", D);
  cb.linear("t_embed.fc2", D, D);
  cb.add("y_embed.table", "table", (cfg.num_classes + 1) * D, 0);
  cb.elementwise("cond.add_silu", 2 * D);
  const auto depths = cfg.stage_depths();
  const auto chans = cfg.stage_channels();
  const auto res = cfg.stage_resolutions();
  const std::size_t nd = cfg.isotropic ? 0 : cfg.num_downsamples;
  cb.conv("stem", in, C, 3, std::uint64_t(res[0]) * res[0]);
  for (std::size_t i = 0; i < cfg.num_stages(); ++i) {
    const std::uint64_t c = chans[i], hw = std::uint64_t(res[i]) * res[i];
    if (i > nd) {
      cb.conv("up" + std::to_string(i) + ".conv", chans[i - 1], c, cfg.upsample_kernel, hw);
      if (cfg.skip_fusion == "concat")
        cb.conv("fuse" + std::to_string(i), 2 * c, c, cfg.fusion_kernel, hw);
      else
        cb.elementwise("fuse" + std::to_string(i), c * hw);
    }
    cb.linear(stage_name(i) + ".cond", D, c);
    for (std::size_t b = 0; b < depths[i]; ++b)
      detail::block_cost(cb, cfg, stage_name(i) + ".block" + std::to_string(b), c, hw);
    if (i < nd) {
      const std::string d = "down" + std::to_string(i);
      cb.elementwise(d + ".norm", 2 * c * hw, 2 * c);
      cb.conv(d + ".conv", c, 2 * c, 2, hw / 4);
    }
  }
  const std::uint64_t c_last = chans.back(), hw_last = std::uint64_t(res.back()) * res.back();
  cb.elementwise("head.norm", 2 * c_last * hw_last, 2 * c_last);
  cb.conv("head.conv", c_last, cfg.out_channels(), 3, hw_last);
  CostReport r;
  r.model = "fcdm";
  r.resolution = pixel_resolution ? pixel_resolution : cfg.input_resolution;
  r.convention = convention;
  r.rows = std::move(cb.rows);
  r.config = cfg;
  return r;
}

/// Closed-form parameter total.
inline std::uint64_t param_count(const FcdmConfig& cfg) { return flops_fcdm(cfg).total_params(); }

/// Parameter totals per top-level component (embeddings, stem, stageN, downN,
/// upN, fuseN, head).
inline std::vector<std::pair<std::string, std::uint64_t>> param_breakdown(const FcdmConfig& cfg) {
  std::vector<std::pair<std::string, std::uint64_t>> out;
  for (const auto& r : flops_fcdm(cfg).rows) {
    std::string key = r.name.substr(0, r.name.find('.'));
    if (key == "t_embed" || key == "y_embed" || key == "cond") key = "embed";
    if (out.empty() || out.back().first != key) out.emplace_back(key, 0);
    out.back().second += r.params;
  }
  return out;
}

/// Standard published DiT sizes.
struct DitPreset {
  std::string name;
  std::size_t depth, hidden, heads, patch;
};

inline DitPreset dit_preset(const std::string& name) {
  if (name == "dit-s") return {name, 12, 384, 6, 2};
  if (name == "dit-b") return {name, 12, 768, 12, 2};
  if (name == "dit-l") return {name, 24, 1024, 16, 2};
  if (name == "dit-xl") return {name, 28, 1152, 16, 2};
  throw ConfigError("unknown DiT preset: " + name);
}

/// Analytic ViT cost of a class-conditional DiT on a latent of
/// resolution/8 x resolution/8 x 4: patchify, per-block attention projections
/// (4d^2 n), attention products (2 n^2 d), MLP (8 d^2 n), adaLN modulation
/// (6 d^2), and the final adaLN + linear layer. Counts are MACs.
inline CostReport flops_dit_reference(std::size_t depth, std::size_t hidden, std::size_t heads, std::size_t patch,
                                      std::size_t resolution, std::size_t num_classes = 1000,
                                      CountConvention convention = CountConvention::Macs) {
  if (patch == 0 || resolution % (patch * 8))
    throw ConfigError("dit reference: resolution " + std::to_string(resolution) + " not divisible by 8*patch");
  if (heads == 0 || hidden % heads) throw ConfigError("dit reference: hidden must be divisible by heads");
  const std::uint64_t latent = resolution / 8, in = 4, d = hidden, p = patch;
  const std::uint64_t n = (latent / p) * (latent / p);
  detail::CostBuilder cb;
  cb.add("patchify", "conv", p * p * in * d + d, p * p * in * d * n);
  cb.linear("t_embed.fc1", 256, d);
  cb.linear("t_embed.fc2", d, d);
  cb.add("y_embed.table", "table", (num_classes + 1) * d, 0);
  for (std::size_t b = 0; b < depth; ++b) {
    const std::string name = "block" + std::to_string(b);
    cb.linear(name + ".adaLN", d, 6 * d);
    cb.add(name + ".qkv_proj", "linear", 4 * d * d + 4 * d, 4 * d * d * n);
    cb.add(name + ".attention", "attention", 0, 2 * n * n * d);
    cb.add(name + ".mlp", "linear", 8 * d * d + 5 * d, 8 * d * d * n);
  }
  cb.linear("final.adaLN", d, 2 * d);
  cb.add("final.linear", "linear", d * p * p * 2 * in + p * p * 2 * in, d * p * p * 2 * in * n);
  CostReport r;
  r.model = "dit";
  r.resolution = resolution;
  r.convention = convention;
  r.rows = std::move(cb.rows);
  r.config = {{"depth", depth}, {"hidden", hidden}, {"heads", heads}, {"patch", patch}};
  return r;
}

inline CostReport flops_dit_reference(const DitPreset& p, std::size_t resolution) {
  return flops_dit_reference(p.depth, p.hidden, p.heads, p.patch, resolution);
}

struct MatchResult {
  std::size_t base_channels = 0;
  std::uint64_t macs = 0;
  std::uint64_t target_macs = 0;
  double rel_diff() const {
    return std::abs(static_cast<double>(macs) - static_cast<double>(target_macs)) / static_cast<double>(target_macs);
  }
};

/// Finds the base width whose MACs are closest to `target_macs`, keeping every
/// other field of `variant`. MACs grow monotonically with C, so a binary
/// search brackets the target and the closer neighbour wins.
inline MatchResult match_flops(FcdmConfig variant, std::uint64_t target_macs, std::size_t max_channels = 1 << 14) {
  auto macs_at = [&](std::size_t c) {
    variant.base_channels = c;
    return flops_fcdm(variant).total_macs();
  };
  std::size_t lo = 1, hi = max_channels;
  if (macs_at(hi) < target_macs) throw Error("match_flops: target exceeds the search range");
  while (hi - lo > 1) {
    const std::size_t mid = lo + (hi - lo) / 2;
    (macs_at(mid) < target_macs ? lo : hi) = mid;
  }
  const std::uint64_t ml = macs_at(lo), mh = macs_at(hi);
  const bool pick_lo = target_macs - std::min(ml, target_macs) <= mh - target_macs;
  MatchResult r;
  r.base_channels = pick_lo ? lo : hi;
  r.macs = pick_lo ? ml : mh;
  r.target_macs = target_macs;
  return r;
}

}  // namespace fcdm
