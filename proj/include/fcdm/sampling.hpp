#pragma once

#include <optional>
#include <string>
#include <vector>

#include "fcdm/diffusion.hpp"
#include "fcdm/threads.hpp"

namespace fcdm {

struct GenerateOptions {
  std::size_t num = 16;
  /// Fixed class for every sample; nullopt draws classes uniformly.
  std::optional<std::size_t> label;
  double cfg_scale = 1.0;
  /// Sampling steps; 0 means one per schedule timestep.
  std::size_t steps = 0;
  std::uint64_t seed = 0;
  std::size_t threads = 1;
  /// Samples per independent chain batch; chunk k draws its noise from
  /// Rng::stream(seed, k), so results do not depend on `threads`.
  std::size_t chunk = 64;
  /// iDDPM only: clamp the implied x0 to the data range [-1, 1] at every step.
  bool clip_denoised = true;
};

struct Generated {
  Tensor<float> samples;  // [num, C, H, W]
  std::vector<std::size_t> labels;
  std::size_t steps = 0;
  bool respaced = false;
};

/// Draws samples from a trained model: ancestral sampling for "iddpm",
/// deterministic Euler integration for "flow".
inline Generated generate(const Model<float>& m, const std::string& objective, const ScheduleConfig& sc,
                          const GenerateOptions& o) {
  if (!(o.cfg_scale >= 0) || !std::isfinite(o.cfg_scale))
    throw Error("sample: cfg scale must be finite and >= 0, got " + std::to_string(o.cfg_scale));
  if (o.num == 0) throw Error("sample: need at least one sample");
  if (o.chunk == 0) throw Error("sample: chunk must be >= 1");
  if (o.steps > sc.steps)
    throw Error("sample: steps " + std::to_string(o.steps) + " exceed the schedule's " + std::to_string(sc.steps) +
                " timesteps");
  if (o.label && *o.label >= m.cfg.num_classes)
    throw Error("sample: class " + std::to_string(*o.label) + " is not below num_classes " +
                std::to_string(m.cfg.num_classes));
  if (objective != "iddpm" && objective != "flow") throw Error("sample: unknown objective " + objective);
  const NoiseSchedule base = make_schedule(sc);
  Generated g;
  g.steps = o.steps ? o.steps : sc.steps;
  g.respaced = objective == "iddpm" && g.steps < sc.steps;
  g.labels.resize(o.num);
  Rng lr = Rng::stream(o.seed, 0x1abe15ULL);
  for (auto& y : g.labels) y = o.label ? *o.label : lr.below(m.cfg.num_classes);
  const std::size_t C = m.cfg.in_channels, R = m.cfg.input_resolution, per = C * R * R;
  g.samples = Tensor<float>({o.num, C, R, R});
  const PredictFn<float> f = model_predictor(m);
  const std::size_t chunks = (o.num + o.chunk - 1) / o.chunk;
  parallel_for(chunks, std::max<std::size_t>(1, o.threads), [&](std::size_t k) {
    const std::size_t lo = k * o.chunk, n = std::min(o.chunk, o.num - lo);
    const std::vector<std::size_t> y(g.labels.begin() + lo, g.labels.begin() + lo + n);
    Rng rng = Rng::stream(o.seed, k);
    Tensor<float> x;
    if (objective == "iddpm") {
      SampleOptions so;
      so.steps = g.steps;
      so.guidance.scale = o.cfg_scale;
      so.null_label = m.cfg.num_classes;
      so.clip_denoised = o.clip_denoised;
      x = p_sample_loop(f, {n, C, R, R}, y, base, so, rng);
    } else {
      EulerOptions eo;
      eo.steps = g.steps;
      eo.guidance.scale = o.cfg_scale;
      eo.null_label = m.cfg.num_classes;
      x = euler_sample(f, {n, C, R, R}, y, eo, rng);
    }
    std::copy_n(x.data(), n * per, g.samples.data() + lo * per);
  });
  return g;
}

}  // namespace fcdm
