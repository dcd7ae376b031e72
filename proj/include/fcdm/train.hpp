#pragma once

#include <chrono>
#include <cmath>
#include <cstdio>
#include <filesystem>
#include <fstream>
#include <functional>
#include <iomanip>
#include <sstream>
#include <string>
#include <thread>
#include <vector>

#include "fcdm/checkpoint.hpp"
#include "fcdm/data.hpp"
#include "fcdm/diffusion.hpp"
#include "fcdm/model.hpp"
#include "fcdm/optim.hpp"
#include "fcdm/threads.hpp"

namespace fcdm {

struct TrainConfig {
  double lr = 1e-4;
  double beta1 = 0.9;
  double beta2 = 0.999;
  double weight_decay = 0;
  std::size_t batch_size = 256;
  std::size_t total_steps = 400000;
  double ema_decay = 0.9999;
  double p_uncond = 0.1;
  std::uint64_t seed = 0;
  std::string objective = "iddpm";  // iddpm | flow
  std::size_t log_interval = 100;
  std::size_t checkpoint_interval = 10000;
  double lambda_vlb = 1e-3;
  double flip_prob = 0.5;
  /// Samples per independent tape; 0 means the whole batch on one tape.
  std::size_t micro_batch = 0;

  void validate() const {
    if (!(lr > 0)) throw ConfigError("train.lr must be > 0");
    if (!(ema_decay >= 0 && ema_decay <= 1)) throw ConfigError("train.ema_decay must lie in [0, 1]");
    if (!(beta1 >= 0 && beta1 < 1) || !(beta2 >= 0 && beta2 < 1)) throw ConfigError("train.betas must lie in [0, 1)");
    if (!(weight_decay >= 0)) throw ConfigError("train.weight_decay must be >= 0");
    if (batch_size == 0) throw ConfigError("train.batch_size must be >= 1");
    if (!(p_uncond >= 0 && p_uncond <= 1)) throw ConfigError("train.p_uncond must lie in [0, 1]");
    if (!(flip_prob >= 0 && flip_prob <= 1)) throw ConfigError("train.flip_prob must lie in [0, 1]");
    if (!(lambda_vlb >= 0)) throw ConfigError("train.lambda_vlb must be >= 0");
    if (objective != "iddpm" && objective != "flow")
      throw ConfigError("train.objective must be iddpm or flow, got " + objective);
  }

  AdamWConfig adamw() const { return {lr, beta1, beta2, 1e-8, weight_decay}; }

  friend bool operator==(const TrainConfig&, const TrainConfig&) = default;
};

inline void to_json(json& j, const TrainConfig& c) {
  j = json{{"lr", c.lr},
           {"betas", {c.beta1, c.beta2}},
           {"weight_decay", c.weight_decay},
           {"batch_size", c.batch_size},
           {"total_steps", c.total_steps},
           {"ema_decay", c.ema_decay},
           {"p_uncond", c.p_uncond},
           {"seed", c.seed},
           {"objective", c.objective},
           {"log_interval", c.log_interval},
           {"checkpoint_interval", c.checkpoint_interval},
           {"lambda_vlb", c.lambda_vlb},
           {"flip_prob", c.flip_prob},
           {"micro_batch", c.micro_batch}};
}

inline void from_json(const json& j, TrainConfig& c) {
  const std::string w = "train";
  check_keys(j, {"lr", "betas", "weight_decay", "batch_size", "total_steps", "ema_decay", "p_uncond", "seed",
                 "objective", "log_interval", "checkpoint_interval", "lambda_vlb", "flip_prob", "micro_batch"},
             w);
  read_key(j, "lr", c.lr, w);
  if (j.contains("betas")) {
    std::vector<double> b;
    read_key(j, "betas", b, w);
    if (b.size() != 2) throw ConfigError("train.betas must have two entries");
    c.beta1 = b[0];
    c.beta2 = b[1];
  }
  read_key(j, "weight_decay", c.weight_decay, w);
  read_key(j, "batch_size", c.batch_size, w);
  read_key(j, "total_steps", c.total_steps, w);
  read_key(j, "ema_decay", c.ema_decay, w);
  read_key(j, "p_uncond", c.p_uncond, w);
  read_key(j, "seed", c.seed, w);
  read_key(j, "objective", c.objective, w);
  read_key(j, "log_interval", c.log_interval, w);
  read_key(j, "checkpoint_interval", c.checkpoint_interval, w);
  read_key(j, "lambda_vlb", c.lambda_vlb, w);
  read_key(j, "flip_prob", c.flip_prob, w);
  read_key(j, "micro_batch", c.micro_batch, w);
  c.validate();
}

/// Desk-scale training preset for fcdm-toy on the blob dataset.
inline TrainConfig toy_train_config() {
  TrainConfig c;
  c.lr = 1e-4;
  c.batch_size = 64;
  c.total_steps = 2000;
  c.ema_decay = 0.995;
  c.p_uncond = 0.1;
  c.log_interval = 100;
  c.checkpoint_interval = 500;
  return c;
}

/// Model, optimizer and EMA together with the configs that produced them.
struct RunState {
  FcdmConfig model;
  TrainConfig train;
  ScheduleConfig schedule;
  ParamStore<float> params;
  ParamStore<float> ema;
  OptimizerState<float> opt;
  std::uint64_t step = 0;

  json config_json() const { return json{{"model", model}, {"train", train}, {"schedule", schedule}}; }

  Checkpoint to_checkpoint() const {
    return Checkpoint{config_json(), step, train.seed, step, params, ema, opt};
  }

  static RunState from_checkpoint(const Checkpoint& ck) {
    RunState s;
    try {
      s.model = ck.config.at("model").get<FcdmConfig>();
      s.train = ck.config.at("train").get<TrainConfig>();
      s.schedule = ck.config.at("schedule").get<ScheduleConfig>();
    } catch (const json::exception& e) {
      throw FormatError(std::string("checkpoint config: ") + e.what());
    }
    Rng probe(0);
    const Model<float> fresh = build_model<float>(s.model, probe);
    if (!fresh.params.same_layout(ck.params))
      throw FormatError("checkpoint parameters do not match the architecture in its config");
    s.params = ck.params;
    s.ema = ck.ema;
    s.opt = ck.opt;
    s.step = ck.step;
    return s;
  }

  /// FNV-1a over parameters, EMA and step.
  std::uint64_t checksum() const {
    std::uint64_t h = params.checksum();
    h = fnv1a(&step, sizeof step, h);
    const std::uint64_t e = ema.checksum();
    return fnv1a(&e, sizeof e, h);
  }
};

inline RunState init_run(const FcdmConfig& model, const TrainConfig& train, const ScheduleConfig& schedule) {
  model.validate();
  train.validate();
  if (train.objective == "flow" && model.learn_sigma) throw ConfigError("flow objective needs model.learn_sigma = false");
  RunState s{model, train, schedule, {}, {}, {}, 0};
  Rng rng = Rng::stream(train.seed, 0x9a7aULL);
  s.params = build_model<float>(model, rng).params;
  s.ema = s.params;
  s.opt = OptimizerState<float>::zeros_like(s.params);
  return s;
}

struct MetricsRow {
  std::uint64_t step = 0;
  double loss = 0, l_simple = 0, l_vlb = 0, wallclock = 0;
};

inline std::string metrics_header() { return "step,loss,l_simple,l_vlb,wallclock"; }

inline std::string format_metrics(const MetricsRow& r) {
  std::ostringstream os;
  os << r.step << ',' << std::setprecision(9) << r.loss << ',' << r.l_simple << ',' << r.l_vlb << ','
     << std::setprecision(6) << std::fixed << r.wallclock;
  return os.str();
}

/// Batch composition for one step, fully determined by (seed, step).
struct StepPlan {
  std::vector<std::size_t> indices;
  std::vector<bool> flip;
  std::vector<std::size_t> labels;
  std::uint64_t noise_seed = 0;
};

/// Labels dropped to the condition-free class become `null_label`.
inline StepPlan plan_step(const TrainConfig& cfg, const Dataset& ds, std::uint64_t step, std::size_t null_label) {
  StepPlan p;
  Rng rng = Rng::stream(cfg.seed, step);
  const std::size_t B = cfg.batch_size, N = ds.size();
  std::uint64_t epoch = ~0ULL;
  std::vector<std::size_t> perm;
  for (std::size_t j = 0; j < B; ++j) {
    const std::uint64_t pos = step * B + j;
    if (pos / N != epoch) {
      epoch = pos / N;
      Rng er = Rng::stream(cfg.seed ^ 0x5eedda7aULL, epoch);
      perm = permutation(er, N);
    }
    p.indices.push_back(perm[pos % N]);
  }
  for (std::size_t j = 0; j < B; ++j) p.flip.push_back(rng.uniform() < cfg.flip_prob);
  for (std::size_t j = 0; j < B; ++j)
    p.labels.push_back(rng.uniform() < cfg.p_uncond ? null_label : ds.labels[p.indices[j]]);
  p.noise_seed = rng.next_u64();
  return p;
}

struct StepResult {
  MetricsRow metrics;
  std::vector<Tensor<float>> grads;
};

/// Loss and gradients for one planned batch. Micro-batches run on separate
/// tapes (in parallel when threads > 1) and are reduced in a fixed order.
inline StepResult compute_step(const RunState& s, const NoiseSchedule& sched, const Dataset& ds, const StepPlan& plan,
                               std::size_t threads = 1) {
  const std::size_t B = plan.indices.size();
  const std::size_t mb = s.train.micro_batch ? std::min(s.train.micro_batch, B) : B;
  const std::size_t M = (B + mb - 1) / mb;
  struct Part {
    double loss = 0, simple = 0, vlb = 0;
    std::vector<Tensor<float>> grads;
  };
  std::vector<Part> parts(M);
  auto run = [&](std::size_t m) {
    const std::size_t lo = m * mb, hi = std::min(B, lo + mb);
    std::vector<std::size_t> idx(plan.indices.begin() + lo, plan.indices.begin() + hi);
    std::vector<bool> flip(plan.flip.begin() + lo, plan.flip.begin() + hi);
    std::vector<std::size_t> y(plan.labels.begin() + lo, plan.labels.begin() + hi);
    const Tensor<float> x0 = gather_batch(ds, idx, flip);
    Rng rng = Rng::stream(plan.noise_seed, m);
    Tape<float> tape;
    Binder<float> p(tape, s.params);
    LossTerms<float> terms = s.train.objective == "flow"
                                 ? flow_matching_loss(p, s.model, x0, y, rng)
                                 : loss_hybrid(p, s.model, x0, y, sched, rng, s.train.lambda_vlb);
    tape.backward(terms.loss);
    parts[m] = {double(terms.loss.value().item()), terms.simple, terms.vlb, p.grads()};
  };
  parallel_for(M, threads, run);

  StepResult out;
  if (M == 1) {
    out.metrics = {0, parts[0].loss, parts[0].simple, parts[0].vlb, 0};
    out.grads = std::move(parts[0].grads);
    return out;
  }
  for (const auto& t : s.params.tensors()) out.grads.emplace_back(t.shape());
  for (std::size_t m = 0; m < M; ++m) {
    const std::size_t lo = m * mb, hi = std::min(B, lo + mb);
    const double w = double(hi - lo) / double(B);
    out.metrics.loss += w * parts[m].loss;
    out.metrics.l_simple += w * parts[m].simple;
    out.metrics.l_vlb += w * parts[m].vlb;
    for (std::size_t i = 0; i < out.grads.size(); ++i) {
      float* g = out.grads[i].data();
      const float* pg = parts[m].grads[i].data();
      for (std::size_t k = 0; k < out.grads[i].numel(); ++k) g[k] += static_cast<float>(w * pg[k]);
    }
  }
  return out;
}

enum class TrainStatus { completed, stopped, aborted_nonfinite };

struct TrainOptions {
  /// Run directory for metrics.csv and checkpoints; empty keeps everything in memory.
  std::string out_dir;
  /// Stop (and checkpoint) once this step is reached; 0 means total_steps.
  std::uint64_t stop_at = 0;
  std::size_t threads = 1;
  /// Called after every completed step with the post-update state.
  std::function<void(const RunState&, const StepResult&)> on_step;
  std::ostream* log = nullptr;
};

struct TrainResult {
  TrainStatus status = TrainStatus::completed;
  std::string message;
  std::vector<MetricsRow> metrics;
  std::uint64_t steps_run = 0;
};

inline std::string checkpoint_path(const std::string& dir, std::uint64_t step) {
  char buf[32];
  std::snprintf(buf, sizeof buf, "ckpt_%07llu.fckp", static_cast<unsigned long long>(step));
  return (std::filesystem::path(dir) / buf).string();
}

namespace detail {

inline void check_dataset_fits(const FcdmConfig& m, const Dataset& ds) {
  ds.validate();
  if (ds.channels() != m.in_channels || ds.height() != m.input_resolution || ds.width() != m.input_resolution)
    throw ShapeError("dataset samples are " + std::to_string(ds.channels()) + "x" + std::to_string(ds.height()) + "x" +
                     std::to_string(ds.width()) + " but the model expects " + std::to_string(m.in_channels) + "x" +
                     std::to_string(m.input_resolution) + "x" + std::to_string(m.input_resolution));
  if (ds.num_classes > m.num_classes)
    throw ShapeError("dataset has " + std::to_string(ds.num_classes) + " classes but the model only " +
                     std::to_string(m.num_classes));
}

/// Keeps the header and rows with step <= `upto`; creates the file if absent.
inline void trim_metrics(const std::string& path, std::uint64_t upto) {
  std::vector<std::string> keep{metrics_header()};
  if (std::ifstream in(path); in) {
    std::string line;
    std::getline(in, line);
    while (std::getline(in, line)) {
      if (line.empty()) continue;
      if (std::stoull(line.substr(0, line.find(','))) <= upto) keep.push_back(line);
    }
  }
  std::ofstream out(path, std::ios::trunc);
  for (const auto& l : keep) out << l << '\n';
}

}  // namespace detail

/// Runs optimisation steps from s.step up to the stop step. On a non-finite
/// loss or gradient the step is discarded and the last checkpoint kept.
inline TrainResult train_loop(RunState& s, const Dataset& ds, const TrainOptions& o = {}) {
  s.train.validate();
  detail::check_dataset_fits(s.model, ds);
  const NoiseSchedule sched = make_schedule(s.schedule);
  const std::uint64_t stop = o.stop_at ? std::min<std::uint64_t>(o.stop_at, s.train.total_steps) : s.train.total_steps;
  TrainResult res;
  std::ofstream metrics;
  if (!o.out_dir.empty()) {
    std::filesystem::create_directories(o.out_dir);
    const std::string mpath = (std::filesystem::path(o.out_dir) / "metrics.csv").string();
    detail::trim_metrics(mpath, s.step);
    metrics.open(mpath, std::ios::app);
    if (!metrics) throw Error("cannot write " + mpath);
  }
  auto save = [&] {
    if (o.out_dir.empty()) return;
    const Checkpoint ck = s.to_checkpoint();
    save_checkpoint(checkpoint_path(o.out_dir, s.step), ck);
    save_checkpoint((std::filesystem::path(o.out_dir) / "last.fckp").string(), ck);
  };
  const auto t0 = std::chrono::steady_clock::now();
  const AdamWConfig acfg = s.train.adamw();
  while (s.step < stop) {
    const StepPlan plan = plan_step(s.train, ds, s.step, s.model.num_classes);
    StepResult r = compute_step(s, sched, ds, plan, o.threads);
    r.metrics.step = s.step + 1;
    try {
      if (!std::isfinite(r.metrics.loss))
        throw NonFiniteError("non-finite loss " + std::to_string(r.metrics.loss) + " at step " +
                             std::to_string(r.metrics.step));
      adamw_step(s.params, r.grads, s.opt, acfg);
    } catch (const NonFiniteError& e) {
      res.status = TrainStatus::aborted_nonfinite;
      res.message = e.what();
      if (o.log) *o.log << "abort: " << e.what() << "\n";
      return res;
    }
    ema_update(s.ema, s.params, s.train.ema_decay);
    ++s.step;
    ++res.steps_run;
    r.metrics.wallclock = std::chrono::duration<double>(std::chrono::steady_clock::now() - t0).count();
    res.metrics.push_back(r.metrics);
    if (metrics) metrics << format_metrics(r.metrics) << '\n' << std::flush;
    if (o.log && s.train.log_interval && s.step % s.train.log_interval == 0)
      *o.log << "step " << s.step << " loss " << r.metrics.loss << " l_simple " << r.metrics.l_simple << " l_vlb "
             << r.metrics.l_vlb << " (" << r.metrics.wallclock << " s)\n";
    if (o.on_step) o.on_step(s, r);
    if (s.train.checkpoint_interval && s.step % s.train.checkpoint_interval == 0 && s.step != stop) save();
  }
  if (res.steps_run > 0) save();
  res.status = s.step >= s.train.total_steps ? TrainStatus::completed : TrainStatus::stopped;
  return res;
}

}  // namespace fcdm
