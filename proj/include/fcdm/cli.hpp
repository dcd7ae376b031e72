#pragma once

#include <CLI11.hpp>

#include <chrono>
#include <ctime>
#include <filesystem>
#include <fstream>
#include <iomanip>
#include <iostream>
#include <optional>
#include <sstream>
#include <string>
#include <vector>

#include "fcdm/bench.hpp"
#include "fcdm/cost.hpp"
#include "fcdm/features.hpp"
#include "fcdm/fid.hpp"
#include "fcdm/gradsuite.hpp"
#include "fcdm/image.hpp"
#include "fcdm/sampling.hpp"
#include "fcdm/spectral.hpp"
#include "fcdm/train.hpp"

namespace fcdm {

inline constexpr const char* kVersion = "0.1.0";

/// Bad invocation: exit code 1.
class UsageError : public Error {
 public:
  using Error::Error;
};

/// Resolved configuration of a training run.
struct RunConfig {
  FcdmConfig model;
  TrainConfig train;
  ScheduleConfig schedule;
};

inline TrainConfig train_preset(const std::string& name) {
  if (name == "paper") return TrainConfig{};
  if (name == "toy") return toy_train_config();
  throw ConfigError("unknown train preset: " + name + " (expected paper, toy)");
}

/// Accepts {model_preset, model, train_preset, train, schedule}; the "model"
/// and "train" objects override fields of their presets key by key.
inline RunConfig resolve_run_config(const json& j) {
  if (!j.is_object()) throw ConfigError("run config must be a JSON object");
  check_keys(j, {"model_preset", "model", "train_preset", "train", "schedule"}, "run config");
  auto overlay = [](json base, const json& j, const char* key) {
    if (!j.contains(key)) return base;
    if (!j.at(key).is_object()) throw ConfigError(std::string(key) + " must be a JSON object");
    for (const auto& [k, v] : j.at(key).items()) base[k] = v;
    return base;
  };
  auto text = [&](const char* key, const char* def) {
    if (!j.contains(key)) return std::string(def);
    if (!j.at(key).is_string()) throw ConfigError(std::string(key) + " must be a string");
    return j.at(key).get<std::string>();
  };
  RunConfig rc;
  try {
    rc.model = overlay(json(model_preset(text("model_preset", "fcdm-s"))), j, "model").get<FcdmConfig>();
    rc.train = overlay(json(train_preset(text("train_preset", "paper"))), j, "train").get<TrainConfig>();
    rc.schedule = overlay(json(ScheduleConfig{}), j, "schedule").get<ScheduleConfig>();
  } catch (const json::exception& e) {
    throw ConfigError(std::string("run config: ") + e.what());
  }
  if (rc.train.objective == "flow" && rc.model.learn_sigma)
    throw ConfigError("flow objective needs model.learn_sigma = false");
  return rc;
}

inline json read_json_file(const std::string& path) {
  std::ifstream in(path);
  if (!in) throw UsageError("cannot open " + path);
  try {
    return json::parse(in);
  } catch (const json::parse_error& e) {
    throw ConfigError(path + ": " + e.what());
  }
}

inline void write_text(const std::string& path, const std::string& text) {
  std::ofstream out(path, std::ios::binary | std::ios::trunc);
  if (!out) throw Error("cannot write " + path);
  out << text;
}

inline std::string utc_timestamp() {
  const std::time_t now = std::chrono::system_clock::to_time_t(std::chrono::system_clock::now());
  std::tm tm{};
  gmtime_r(&now, &tm);
  std::ostringstream os;
  os << std::put_time(&tm, "%Y-%m-%dT%H:%M:%SZ");
  return os.str();
}

inline std::string hex64(std::uint64_t v) {
  std::ostringstream os;
  os << std::hex << std::setw(16) << std::setfill('0') << v;
  return os.str();
}

/// --threads if given, otherwise FCDM_THREADS or the hardware count; an
/// FCDM_THREADS setting also caps an explicit request.
inline std::size_t resolve_threads(std::size_t requested) {
  const std::size_t cap = thread_count();
  if (requested == 0) return cap;
  const char* env = std::getenv("FCDM_THREADS");
  return env && *env ? std::min(requested, cap) : requested;
}

inline Model<float> checkpoint_model(const RunState& s, bool raw) { return Model<float>{s.model, raw ? s.params : s.ema}; }

inline RunState load_run(const std::string& path) {
  if (!std::filesystem::exists(path)) throw UsageError("checkpoint not found: " + path);
  return RunState::from_checkpoint(load_checkpoint(path));
}

namespace cli_detail {

struct Streams {
  std::ostream& out;
  std::ostream& err;
};

inline std::string join(const std::string& dir, const std::string& name) {
  return (std::filesystem::path(dir) / name).string();
}

inline FcdmConfig model_from_args(const std::string& preset, const std::string& config) {
  if (!config.empty()) {
    const json j = read_json_file(config);
    if (j.contains("model_preset") || j.contains("train") || j.contains("schedule") || j.contains("train_preset"))
      return resolve_run_config(j).model;
    try {
      return j.get<FcdmConfig>();
    } catch (const json::exception& e) {
      throw ConfigError(config + ": " + e.what());
    }
  }
  return model_preset(preset);
}

/// Latent presets describe 256x256 images; toy models run on pixels.
inline std::size_t pixel_resolution(const FcdmConfig& c) {
  return c.in_channels == 4 ? 8 * c.input_resolution : c.input_resolution;
}

inline int cmd_datagen(Streams io, const std::string& out, std::size_t count, std::size_t res, std::size_t classes,
                       std::uint64_t seed) {
  const Dataset ds = make_blob_dataset(count, res, classes, seed);
  if (const auto parent = std::filesystem::path(out).parent_path(); !parent.empty())
    std::filesystem::create_directories(parent);
  save_dataset(out, ds);
  io.out << "wrote " << ds.size() << " samples (" << ds.channels() << "x" << ds.height() << "x" << ds.width() << ", "
         << ds.num_classes << " classes) to " << out << "\n";
  return 0;
}

struct TrainArgs {
  std::string config, data, out, resume;
  std::size_t threads = 0;
  std::uint64_t stop_at = 0;
};

inline int cmd_train(Streams io, const TrainArgs& a) {
  const RunConfig rc = resolve_run_config(read_json_file(a.config));
  if (!std::filesystem::exists(a.data)) throw UsageError("dataset not found: " + a.data);
  const Dataset ds = load_dataset(a.data);
  RunState s;
  if (!a.resume.empty()) {
    s = load_run(a.resume);
    TrainConfig want = rc.train, have = s.train;
    want.total_steps = have.total_steps = 0;
    want.log_interval = have.log_interval = 0;
    want.checkpoint_interval = have.checkpoint_interval = 0;
    if (!(s.model == rc.model) || !(s.schedule == rc.schedule) || !(want == have))
      throw ConfigError("--resume: checkpoint " + a.resume + " was written with a different configuration");
    s.train = rc.train;
  } else {
    s = init_run(rc.model, rc.train, rc.schedule);
  }
  detail::check_dataset_fits(s.model, ds);
  std::filesystem::create_directories(a.out);
  const std::size_t threads = resolve_threads(a.threads);
  const std::string manifest_path = join(a.out, "manifest.json");
  json manifest{{"tool", "fcdm"},
                {"version", kVersion},
                {"command", "train"},
                {"config", s.config_json()},
                {"seed", s.train.seed},
                {"threads", threads},
                {"paths",
                 {{"config", std::filesystem::absolute(a.config).string()},
                  {"data", std::filesystem::absolute(a.data).string()},
                  {"out", std::filesystem::absolute(a.out).string()},
                  {"resume", a.resume.empty() ? json(nullptr) : json(std::filesystem::absolute(a.resume).string())},
                  {"metrics", "metrics.csv"},
                  {"last_checkpoint", "last.fckp"}}},
                {"start_step", s.step},
                {"started_at", utc_timestamp()},
                {"finished_at", nullptr},
                {"status", "running"}};
  write_text(manifest_path, manifest.dump(2) + "\n");
  io.out << "training " << param_count(s.model) << " parameters from step " << s.step << " to "
         << s.train.total_steps << " on " << threads << " thread(s)\n";
  TrainOptions opt;
  opt.out_dir = a.out;
  opt.threads = threads;
  opt.stop_at = a.stop_at;
  opt.log = &io.out;
  const TrainResult r = train_loop(s, ds, opt);
  static constexpr const char* names[] = {"completed", "stopped", "aborted_nonfinite"};
  manifest["finished_at"] = utc_timestamp();
  manifest["status"] = names[static_cast<int>(r.status)];
  manifest["final_step"] = s.step;
  manifest["steps_run"] = r.steps_run;
  manifest["checksum"] = hex64(s.checksum());
  if (!r.message.empty()) manifest["message"] = r.message;
  write_text(manifest_path, manifest.dump(2) + "\n");
  if (r.status == TrainStatus::aborted_nonfinite) {
    io.err << "error: training aborted: " << r.message << "\n";
    return 2;
  }
  io.out << (r.steps_run ? "finished" : "nothing to do") << " at step " << s.step << ", checksum " << hex64(s.checksum())
         << "\n";
  return 0;
}

struct SampleArgs {
  std::string ckpt, cls = "random", out;
  std::size_t num = 16, steps = 0, threads = 0;
  double cfg_scale = 1.0;
  std::uint64_t seed = 0;
  bool raw = false, png = true, clip = true;
};

inline int cmd_sample(Streams io, const SampleArgs& a) {
  if (!(a.cfg_scale >= 0)) throw UsageError("--cfg-scale must be >= 0");
  const RunState s = load_run(a.ckpt);
  if (a.steps > s.schedule.steps)
    throw UsageError("--steps " + std::to_string(a.steps) + " exceeds T = " + std::to_string(s.schedule.steps));
  GenerateOptions o;
  o.num = a.num;
  o.cfg_scale = a.cfg_scale;
  o.steps = a.steps;
  o.seed = a.seed;
  o.threads = resolve_threads(a.threads);
  o.clip_denoised = a.clip;
  if (a.cls != "random") {
    std::size_t used = 0;
    unsigned long v = 0;
    try {
      v = std::stoul(a.cls, &used);
    } catch (const std::exception&) {
      used = 0;
    }
    if (used != a.cls.size() || a.cls.empty()) throw UsageError("--class must be an integer or \"random\"");
    if (v >= s.model.num_classes)
      throw UsageError("--class " + a.cls + " is not below num_classes " + std::to_string(s.model.num_classes));
    o.label = v;
  }
  const Model<float> m = checkpoint_model(s, a.raw);
  if (s.train.objective == "iddpm" && o.steps && o.steps < s.schedule.steps)
    io.out << "respacing: sampling " << o.steps << " of " << s.schedule.steps << " timesteps\n";
  const Generated g = generate(m, s.train.objective, s.schedule, o);
  std::filesystem::create_directories(a.out);
  Dataset ds;
  ds.images = g.samples;
  ds.labels.assign(g.labels.begin(), g.labels.end());
  ds.num_classes = s.model.num_classes;
  save_dataset(join(a.out, "samples.fcds"), ds);
  if (a.png && (s.model.in_channels == 1 || s.model.in_channels == 3))
    write_png(join(a.out, "samples.png"), sample_grid(g.samples));
  const json meta{{"checkpoint_step", s.step},
                  {"weights", a.raw ? "raw" : "ema"},
                  {"objective", s.train.objective},
                  {"num", a.num},
                  {"labels", g.labels},
                  {"cfg_scale", a.cfg_scale},
                  {"steps", g.steps},
                  {"respaced", g.respaced},
                  {"clip_denoised", s.train.objective == "iddpm" && a.clip},
                  {"seed", a.seed}};
  write_text(join(a.out, "samples.json"), meta.dump(2) + "\n");
  io.out << "wrote " << a.num << " samples (" << g.steps << " " << (s.train.objective == "flow" ? "Euler" : "ancestral")
         << " steps, cfg scale " << a.cfg_scale << ") to " << a.out << "\n";
  return 0;
}

inline Tensor<float> probe_batch(const Dataset& ds, std::size_t n, std::vector<std::size_t>& labels) {
  n = std::min(n, ds.size());
  std::vector<std::size_t> idx(n);
  for (std::size_t i = 0; i < n; ++i) idx[i] = i;
  labels.assign(ds.labels.begin(), ds.labels.begin() + n);
  return gather_batch(ds, idx, std::vector<bool>(n, false));
}

}  // namespace cli_detail

/// Runs one command line; returns the process exit code
/// (0 ok, 1 usage or configuration error, 2 runtime abort).
inline int run_cli(int argc, const char* const* argv, std::ostream& out = std::cout, std::ostream& err = std::cerr) {
  using namespace cli_detail;
  Streams io{out, err};
  CLI::App app{"Fully convolutional diffusion models: training, sampling and analysis", "fcdm"};
  app.set_version_flag("--version", kVersion);
  app.require_subcommand(1);

  std::string dg_out;
  std::size_t dg_count = 2048, dg_res = 8, dg_classes = 4;
  std::uint64_t dg_seed = 0;
  auto* datagen = app.add_subcommand("datagen", "Write the synthetic blob dataset (FCDS)");
  datagen->add_option("--out", dg_out, "Output .fcds path")->required();
  datagen->add_option("--count", dg_count, "Number of samples")->check(CLI::PositiveNumber);
  datagen->add_option("--resolution", dg_res, "Image side length")->check(CLI::Range(2, 4096));
  datagen->add_option("--classes", dg_classes, "Number of classes")->check(CLI::Range(1, 6));
  datagen->add_option("--seed", dg_seed, "Generator seed");

  TrainArgs ta;
  auto* train = app.add_subcommand("train", "Train a model");
  train->add_option("--config", ta.config, "Run config JSON")->required();
  train->add_option("--data", ta.data, "FCDS dataset")->required();
  train->add_option("--out", ta.out, "Run directory")->required();
  train->add_option("--resume", ta.resume, "Checkpoint to resume from");
  train->add_option("--threads", ta.threads, "Worker threads (default FCDM_THREADS or all cores)");
  train->add_option("--stop-at", ta.stop_at, "Stop after this step (0 = total_steps)");

  SampleArgs sa;
  auto* sample = app.add_subcommand("sample", "Draw samples from a checkpoint");
  sample->add_option("--ckpt", sa.ckpt, "Checkpoint")->required();
  sample->add_option("--class", sa.cls, "Class id or \"random\"");
  sample->add_option("--num", sa.num, "Number of samples")->check(CLI::PositiveNumber);
  sample->add_option("--cfg-scale", sa.cfg_scale, "Guidance scale (1 = conditional only)");
  sample->add_option("--steps", sa.steps, "Sampling steps (0 = T)");
  sample->add_option("--seed", sa.seed, "Sampling seed");
  sample->add_option("--out", sa.out, "Output directory")->required();
  sample->add_option("--threads", sa.threads, "Worker threads");
  sample->add_flag("--raw", sa.raw, "Use raw weights instead of EMA");
  sample->add_flag("--png,!--no-png", sa.png, "Write a PNG grid");
  sample->add_flag("--clip,!--no-clip", sa.clip, "Clamp the predicted x0 to [-1, 1] while sampling (iDDPM)");

  auto* analyze = app.add_subcommand("analyze", "Analysis tools");
  analyze->require_subcommand(1);

  std::string preset = "fcdm-s", model_config, out_dir, dit, convention = "macs";
  std::size_t resolution = 0;
  auto* flops = analyze->add_subcommand("flops", "Analytic MACs/FLOPs and parameters (CostReport)");
  flops->add_option("--preset", preset, "Model preset");
  flops->add_option("--config", model_config, "Model or run config JSON (overrides --preset)");
  flops->add_option("--resolution", resolution, "Pixel resolution label (default from the input size)");
  flops->add_option("--convention", convention, "macs or flops")->check(CLI::IsMember({"macs", "flops"}));
  flops->add_option("--dit", dit, "DiT reference preset to compare against (dit-s/b/l/xl)");
  flops->add_option("--out", out_dir, "Directory for cost CSV/JSON");

  auto* params = analyze->add_subcommand("params", "Parameter breakdown");
  params->add_option("--preset", preset, "Model preset");
  params->add_option("--config", model_config, "Model or run config JSON");

  std::string ckpt, data;
  std::size_t samples = 128, stride = 10, t_index = 0, stage = 0, block = 0, index = 0;
  std::uint64_t seed = 0;
  bool raw = false;
  auto* spectral = analyze->add_subcommand("spectral", "Spectral energy of predicted noise across timesteps");
  spectral->add_option("--ckpt", ckpt, "Checkpoint")->required();
  spectral->add_option("--data", data, "Probe dataset (FCDS)")->required();
  spectral->add_option("--samples", samples, "Probe samples")->check(CLI::PositiveNumber);
  spectral->add_option("--stride", stride, "Timestep stride")->check(CLI::PositiveNumber);
  spectral->add_option("--seed", seed, "Noise seed");
  spectral->add_option("--out", out_dir, "Output directory")->required();
  spectral->add_flag("--raw", raw, "Use raw weights instead of EMA");

  auto* grn = analyze->add_subcommand("grn-dump", "Feature grids before and after one GRN layer");
  grn->add_option("--ckpt", ckpt, "Checkpoint")->required();
  grn->add_option("--data", data, "Dataset to draw the input from")->required();
  grn->add_option("--index", index, "Sample index in the dataset");
  grn->add_option("--t", t_index, "Diffusion timestep index");
  grn->add_option("--stage", stage, "Stage");
  grn->add_option("--block", block, "Block within the stage");
  grn->add_option("--seed", seed, "Noise seed");
  grn->add_option("--out", out_dir, "Output directory")->required();
  grn->add_flag("--raw", raw, "Use raw weights instead of EMA");

  std::string real, fake;
  auto* toyfid = analyze->add_subcommand("toyfid", "Frechet distance on pooled pixels");
  toyfid->add_option("--real", real, "Reference FCDS file")->required();
  toyfid->add_option("--fake", fake, "Generated FCDS file")->required();

  BenchOptions bo;
  auto* bench = analyze->add_subcommand("bench", "Forward throughput");
  bench->add_option("--preset", preset, "Model preset");
  bench->add_option("--config", model_config, "Model or run config JSON");
  bench->add_option("--ckpt", ckpt, "Benchmark the model of a checkpoint");
  bench->add_option("--batch", bo.batch, "Batch size")->check(CLI::PositiveNumber);
  bench->add_option("--iterations", bo.iterations, "Timed iterations");
  bench->add_option("--warmup", bo.warmup, "Warmup iterations (>= 3)");
  bench->add_option("--threads", bo.threads, "Worker threads")->check(CLI::PositiveNumber);
  bench->add_option("--seed", bo.seed, "Input seed");
  bench->add_option("--out", out_dir, "Directory for bench.json");

  bool skip_model = false;
  auto* grad = analyze->add_subcommand("gradcheck", "Gradient checks for every op, layer, block and the toy model");
  grad->add_flag("--skip-model", skip_model, "Leave out the full-model case");

  try {
    app.parse(argc, argv);
  } catch (const CLI::ParseError& e) {
    const int code = app.exit(e, out, err);
    return code == 0 ? 0 : 1;
  }

  try {
    if (*datagen) return cmd_datagen(io, dg_out, dg_count, dg_res, dg_classes, dg_seed);
    if (*train) return cmd_train(io, ta);
    if (*sample) return cmd_sample(io, sa);
    if (*flops) {
      const FcdmConfig cfg = model_from_args(preset, model_config);
      const std::size_t pix = resolution ? resolution : pixel_resolution(cfg);
      const CostReport r = flops_fcdm(cfg, pix, convention == "flops" ? CountConvention::Flops : CountConvention::Macs);
      const std::string name = model_config.empty() ? preset : std::filesystem::path(model_config).stem().string();
      out << name << " at " << pix << "x" << pix << ": params " << std::setprecision(4) << r.total_params() / 1e6
          << "M, " << r.total_macs() / 1e9 << " GMACs (" << 2 * (r.total_macs() / 1e9) << " GFLOPs), convention "
          << convention_name(r.convention) << "\n";
      json j = r.to_json();
      if (!dit.empty()) {
        const CostReport d = flops_dit_reference(dit_preset(dit), pix);
        const double ratio = double(r.total_macs()) / double(d.total_macs());
        out << dit << " at " << pix << "x" << pix << ": params " << d.total_params() / 1e6 << "M, "
            << d.total_macs() / 1e9 << " GMACs; ratio " << 100 * ratio << "%\n";
        j["reference"] = d.to_json();
        j["ratio_to_reference"] = ratio;
      }
      if (!out_dir.empty()) {
        std::filesystem::create_directories(out_dir);
        write_text(join(out_dir, "cost_" + name + ".csv"), r.csv());
        write_text(join(out_dir, "cost_" + name + ".json"), j.dump(2) + "\n");
      }
      return 0;
    }
    if (*params) {
      const FcdmConfig cfg = model_from_args(preset, model_config);
      for (const auto& [name, n] : param_breakdown(cfg)) out << std::setw(12) << n << "  " << name << "\n";
      out << std::setw(12) << param_count(cfg) << "  total\n";
      return 0;
    }
    if (*spectral) {
      const RunState s = load_run(ckpt);
      const Dataset ds = load_dataset(data);
      detail::check_dataset_fits(s.model, ds);
      std::vector<std::size_t> labels;
      const Tensor<float> probes = probe_batch(ds, samples, labels);
      SpectralOptions so;
      so.stride = stride;
      so.seed = seed;
      const SpectralCurve c = spectral_curve(checkpoint_model(s, raw), make_schedule(s.schedule), probes, labels, so);
      std::filesystem::create_directories(out_dir);
      write_text(join(out_dir, "spectral.csv"), c.csv());
      write_text(join(out_dir, "spectral.json"), c.to_json().dump(2) + "\n");
      out << "spectral curve over " << c.timesteps.size() << " timesteps, " << c.samples << " samples: E(t=0) "
          << c.energy.front() << ", E(t=" << c.timesteps.back() << ") " << c.energy.back() << "\n";
      return 0;
    }
    if (*grn) {
      const RunState s = load_run(ckpt);
      const Dataset ds = load_dataset(data);
      detail::check_dataset_fits(s.model, ds);
      if (index >= ds.size()) throw UsageError("--index out of range");
      const NoiseSchedule sched = make_schedule(s.schedule);
      if (t_index >= sched.size()) throw UsageError("--t must be below T = " + std::to_string(sched.size()));
      const Tensor<float> x0 = gather_batch(ds, {index}, {false});
      Rng rng(seed);
      const Tensor<float> xt = q_sample(x0, {t_index}, randn<float>(rng, x0.shape()), sched);
      const GrnDump d = grn_feature_dump(checkpoint_model(s, raw), xt, {sched.timesteps[t_index]},
                                         {std::size_t(ds.labels[index])}, stage, block);
      write_grn_dump(out_dir, d);
      out << "stage " << stage << " block " << block << ": mean |corr| pre-GRN " << d.pre_correlation
          << ", post-GRN " << d.post_correlation << "\n";
      return 0;
    }
    if (*toyfid) {
      const double v = toy_fid(load_dataset(real).images, load_dataset(fake).images);
      out << "toy_fid " << std::setprecision(9) << v << "\n";
      return 0;
    }
    if (*bench) {
      std::optional<RunState> s;
      if (!ckpt.empty()) s = load_run(ckpt);
      const FcdmConfig cfg = s ? s->model : model_from_args(preset, model_config);
      Model<float> m;
      if (s) {
        m = checkpoint_model(*s, false);
      } else {
        Rng rng(bo.seed);
        m = build_model<float>(cfg, rng);
      }
      const BenchReport r = throughput_bench(m, bo);
      out << std::setprecision(4) << r.samples_per_second << " samples/s, latency p50 " << r.p50_ms << " ms, p90 "
          << r.p90_ms << " ms (" << r.hardware << ")\n";
      if (!out_dir.empty()) {
        std::filesystem::create_directories(out_dir);
        write_text(join(out_dir, "bench.json"), r.to_json().dump(2) + "\n");
      }
      return 0;
    }
    if (*grad) {
      GradSuiteOptions go;
      go.include_model = !skip_model;
      go.log = &out;
      const GradSuiteReport r = run_gradient_suite(go);
      out << (r.pass() ? "PASS" : "FAIL") << ": " << r.cases.size() << " cases, worst f64 " << r.worst_f64()
          << ", worst f32 " << r.worst_f32() << ", " << r.seconds << " s\n";
      return r.pass() ? 0 : 2;
    }
  } catch (const UsageError& e) {
    err << "error: " << e.what() << "\n";
    return 1;
  } catch (const ConfigError& e) {
    err << "error: " << e.what() << "\n";
    return 1;
  } catch (const FormatError& e) {
    err << "error: " << e.what() << "\n";
    return 1;
  } catch (const std::exception& e) {
    err << "error: " << e.what() << "\n";
    return 2;
  }
  err << app.help();
  return 1;
}

/// Convenience overload taking the arguments without the program name.
inline int run_cli(const std::vector<std::string>& args, std::ostream& out, std::ostream& err) {
  std::vector<const char*> argv{"fcdm"};
  for (const auto& a : args) argv.push_back(a.c_str());
  return run_cli(static_cast<int>(argv.size()), argv.data(), out, err);
}

}  // namespace fcdm
