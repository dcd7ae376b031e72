#pragma once

#include <cmath>
#include <filesystem>
#include <fstream>
#include <string>

#include "fcdm/image.hpp"
#include "fcdm/model.hpp"

namespace fcdm {

/// Mean |Pearson correlation| over all channel pairs of x [C, H, W]. Pairs
/// involving a constant channel are skipped; returns 0 when none remain.
template <class T>
double mean_abs_channel_correlation(const Tensor<T>& x) {
  if (x.ndim() != 3) throw ShapeError("channel correlation: expected [C, H, W], got " + shape_str(x.shape()));
  const std::size_t C = x.dim(0), S = x.dim(1) * x.dim(2);
  std::vector<std::vector<double>> z(C, std::vector<double>(S));
  std::vector<bool> live(C);
  for (std::size_t c = 0; c < C; ++c) {
    double mean = 0;
    for (std::size_t i = 0; i < S; ++i) mean += x[c * S + i];
    mean /= double(S);
    double ss = 0;
    for (std::size_t i = 0; i < S; ++i) {
      z[c][i] = x[c * S + i] - mean;
      ss += z[c][i] * z[c][i];
    }
    live[c] = ss > 1e-20 * std::max(1.0, mean * mean) * double(S);
    if (live[c])
      for (auto& v : z[c]) v /= std::sqrt(ss);
  }
  double total = 0;
  std::size_t pairs = 0;
  for (std::size_t a = 0; a < C; ++a)
    for (std::size_t b = a + 1; b < C; ++b) {
      if (!live[a] || !live[b]) continue;
      double r = 0;
      for (std::size_t i = 0; i < S; ++i) r += z[a][i] * z[b][i];
      total += std::min(1.0, std::abs(r));
      ++pairs;
    }
  return pairs ? total / double(pairs) : 0.0;
}

struct GrnDump {
  std::size_t stage = 0, block = 0;
  Tensor<float> pre, post;  // [C, H, W] for the selected sample
  double pre_correlation = 0, post_correlation = 0;

  json summary() const {
    return json{{"stage", stage},
                {"block", block},
                {"channels", pre.dim(0)},
                {"pre_grn_mean_abs_correlation", pre_correlation},
                {"post_grn_mean_abs_correlation", post_correlation}};
  }
};

/// Captures activations entering and leaving the GRN of one block for
/// sample `sample` of the batch.
template <class T>
GrnDump grn_feature_dump(const Model<T>& m, const Tensor<T>& x, const std::vector<double>& t,
                         const std::vector<std::size_t>& y, std::size_t stage, std::size_t block,
                         std::size_t sample = 0) {
  if (m.cfg.block_variant != "fcdm" || m.cfg.channel_norm != "grn")
    throw Error("grn_feature_dump: model blocks have no GRN layer");
  const auto depths = m.cfg.stage_depths();
  if (stage >= depths.size())
    throw Error("grn_feature_dump: stage " + std::to_string(stage) + " out of range (" +
                std::to_string(depths.size()) + " stages)");
  if (block >= depths[stage])
    throw Error("grn_feature_dump: block " + std::to_string(block) + " out of range (stage " + std::to_string(stage) +
                " has " + std::to_string(depths[stage]) + ")");
  if (x.ndim() != 4 || sample >= x.dim(0)) throw Error("grn_feature_dump: sample index out of range");
  GrnDump d;
  d.stage = stage;
  d.block = block;
  bool seen = false;
  Probe<T> probe;
  probe.on_grn = [&](std::size_t s, std::size_t b, const Tensor<T>& pre, const Tensor<T>& post) {
    if (s != stage || b != block) return;
    const std::size_t C = pre.dim(1), H = pre.dim(2), W = pre.dim(3), per = C * H * W;
    d.pre = Tensor<float>({C, H, W});
    d.post = Tensor<float>({C, H, W});
    for (std::size_t i = 0; i < per; ++i) {
      d.pre[i] = static_cast<float>(pre[sample * per + i]);
      d.post[i] = static_cast<float>(post[sample * per + i]);
    }
    seen = true;
  };
  predict(m, x, t, y, &probe);
  if (!seen) throw Error("grn_feature_dump: selected GRN was not reached");
  d.pre_correlation = mean_abs_channel_correlation(d.pre);
  d.post_correlation = mean_abs_channel_correlation(d.post);
  return d;
}

/// Writes pre/post grids as PGM and PNG plus a JSON summary into `dir`.
inline void write_grn_dump(const std::string& dir, const GrnDump& d) {
  std::filesystem::create_directories(dir);
  const auto base = std::filesystem::path(dir) / ("stage" + std::to_string(d.stage) + "_block" + std::to_string(d.block));
  const Image pre = channel_grid(d.pre), post = channel_grid(d.post);
  write_pnm(base.string() + "_pre_grn.pgm", pre);
  write_pnm(base.string() + "_post_grn.pgm", post);
  write_png(base.string() + "_pre_grn.png", pre);
  write_png(base.string() + "_post_grn.png", post);
  std::ofstream(base.string() + "_grn.json") << d.summary().dump(2) << '\n';
}

}  // namespace fcdm
