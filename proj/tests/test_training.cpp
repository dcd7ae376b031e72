#include <gtest/gtest.h>

#include <filesystem>
#include <fstream>
#include <sstream>

#include "fcdm/train.hpp"

using namespace fcdm;
namespace fs = std::filesystem;

namespace {

FcdmConfig tiny_model() {
  FcdmConfig cfg;
  cfg.base_channels = 8;
  cfg.base_blocks = 1;
  cfg.in_channels = 3;
  cfg.input_resolution = 8;
  cfg.num_classes = 4;
  cfg.freq_dim = 16;
  return cfg;
}

TrainConfig tiny_train(std::size_t steps) {
  TrainConfig t;
  t.lr = 1e-3;
  t.batch_size = 8;
  t.total_steps = steps;
  t.ema_decay = 0.9;
  t.seed = 11;
  t.log_interval = 0;
  t.checkpoint_interval = 0;
  return t;
}

ScheduleConfig tiny_schedule() { return {100, "linear"}; }

const Dataset& blobs() {
  static const Dataset ds = make_blob_dataset(64, 8, 4, 3);
  return ds;
}

fs::path scratch(const std::string& name) {
  fs::path p = fs::temp_directory_path() / ("fcdm_test_training_" + name);
  fs::remove_all(p);
  fs::create_directories(p);
  return p;
}

std::string slurp(const fs::path& p) {
  std::ifstream f(p, std::ios::binary);
  return std::string(std::istreambuf_iterator<char>(f), {});
}

ParamStore<float> scalar_store(float v) {
  ParamStore<float> ps;
  ps.add("w", Tensor<float>::scalar(v));
  return ps;
}

}  // namespace

TEST(AdamW, ZeroGradientLeavesParamsUnchanged) {
  ParamStore<float> ps;
  ps.add("a", Tensor<float>({2, 3}, 0.7f));
  ps.add("b", Tensor<float>({4}, -1.5f));
  const auto before = ps.checksum();
  auto st = OptimizerState<float>::zeros_like(ps);
  std::vector<Tensor<float>> g{Tensor<float>({2, 3}), Tensor<float>({4})};
  for (int i = 0; i < 3; ++i) adamw_step(ps, g, st, AdamWConfig{});
  EXPECT_EQ(ps.checksum(), before);
  EXPECT_EQ(st.step, 3u);
}

TEST(AdamW, FirstStepWithUnitGradientMovesByLr) {
  ParamStore<double> ps;
  ps.add("w", Tensor<double>::scalar(2.0));
  auto st = OptimizerState<double>::zeros_like(ps);
  AdamWConfig cfg;
  cfg.lr = 1e-3;
  adamw_step(ps, {Tensor<double>::scalar(1.0)}, st, cfg);
  EXPECT_NEAR(ps["w"].item() - 2.0, -cfg.lr / (1 + 1e-8), 1e-15);
}

TEST(AdamW, MatchesHandRecurrenceOverSeveralSteps) {
  ParamStore<double> ps;
  ps.add("w", Tensor<double>::scalar(0.5));
  auto st = OptimizerState<double>::zeros_like(ps);
  AdamWConfig cfg{0.01, 0.8, 0.95, 1e-8, 0.1};
  const double grads[] = {0.3, -1.2, 0.05, 2.0};
  double w = 0.5, m = 0, v = 0;
  for (int k = 0; k < 4; ++k) {
    adamw_step(ps, {Tensor<double>::scalar(grads[k])}, st, cfg);
    m = 0.8 * m + 0.2 * grads[k];
    v = 0.95 * v + 0.05 * grads[k] * grads[k];
    const double mh = m / (1 - std::pow(0.8, k + 1)), vh = v / (1 - std::pow(0.95, k + 1));
    w -= 0.01 * (mh / (std::sqrt(vh) + 1e-8) + 0.1 * w);
    EXPECT_NEAR(ps["w"].item(), w, 1e-14) << "step " << k + 1;
  }
}

TEST(AdamW, UpdateIndependentOfMagnitudeWithoutDecay) {
  auto small = scalar_store(0.01f), large = scalar_store(1000.0f);
  auto s1 = OptimizerState<float>::zeros_like(small), s2 = OptimizerState<float>::zeros_like(large);
  adamw_step(small, {Tensor<float>::scalar(0.25f)}, s1, AdamWConfig{});
  adamw_step(large, {Tensor<float>::scalar(0.25f)}, s2, AdamWConfig{});
  const double d1 = double(small["w"].item()) - 0.01f, d2 = double(large["w"].item()) - 1000.0f;
  EXPECT_NEAR(d1, -1e-4, 1e-9);
  EXPECT_NEAR(d2, -1e-4, 1e-4 * 0.7);  // f32 spacing at 1000 is 6e-5
}

TEST(AdamW, NanGradientNamesParameterAndChangesNothing) {
  ParamStore<float> ps;
  ps.add("good", Tensor<float>({2}, 1.0f));
  ps.add("stage1.block0.pw1.weight", Tensor<float>({2}, 1.0f));
  const auto before = ps.checksum();
  auto st = OptimizerState<float>::zeros_like(ps);
  std::vector<Tensor<float>> g{Tensor<float>({2}, 1.0f), Tensor<float>({2}, std::nanf(""))};
  try {
    adamw_step(ps, g, st, AdamWConfig{});
    FAIL() << "expected NonFiniteError";
  } catch (const NonFiniteError& e) {
    EXPECT_NE(std::string(e.what()).find("stage1.block0.pw1.weight"), std::string::npos);
  }
  EXPECT_EQ(ps.checksum(), before);
  EXPECT_EQ(st.step, 0u);
}

TEST(Ema, DecayEndpointsAndRecurrence) {
  auto shadow = scalar_store(3.0f);
  ema_update(shadow, scalar_store(1.0f), 0.0);
  EXPECT_EQ(shadow["w"].item(), 1.0f);
  ema_update(shadow, scalar_store(9.0f), 1.0);
  EXPECT_EQ(shadow["w"].item(), 1.0f);

  auto s = scalar_store(0.0f);
  ema_update(s, scalar_store(1.0f), 0.5);
  ema_update(s, scalar_store(1.0f), 0.5);
  EXPECT_EQ(s["w"].item(), 0.75f);

  EXPECT_THROW(ema_update(s, scalar_store(1.0f), 1.5), Error);
}

TEST(Data, HflipExamples) {
  Tensor<float> x({1, 1, 2, 2}, {1, 2, 3, 4});
  EXPECT_EQ(hflip(x).storage(), (std::vector<float>{2, 1, 4, 3}));
  Rng rng(1);
  auto y = randn(rng, {2, 3, 5, 7});
  EXPECT_EQ(hflip(hflip(y)), y);
  auto col = randn(rng, {1, 2, 4, 1});
  EXPECT_EQ(hflip(col), col);
}

TEST(Data, GatherBatchFlipsOnlySelectedSamples) {
  const auto& ds = blobs();
  auto b = gather_batch(ds, {5, 5}, {false, true});
  Tensor<float> a({1, 3, 8, 8}, std::vector<float>(b.data(), b.data() + 192));
  Tensor<float> f({1, 3, 8, 8}, std::vector<float>(b.data() + 192, b.data() + 384));
  EXPECT_EQ(hflip(a), f);
}

TEST(Data, BlobDatasetShapeLabelsAndDeterminism) {
  auto ds = make_blob_dataset(2048, 8, 4, 0);
  EXPECT_EQ(ds.images.shape(), (Shape{2048, 3, 8, 8}));
  std::vector<int> counts(4);
  for (auto l : ds.labels) ++counts.at(l);
  for (int c : counts) EXPECT_GT(c, 400);
  for (float v : ds.images.values()) {
    ASSERT_GE(v, -1.1f);
    ASSERT_LE(v, 1.0f);
  }
  EXPECT_EQ(make_blob_dataset(2048, 8, 4, 0).images, ds.images);
  EXPECT_NE(make_blob_dataset(2048, 8, 4, 1).images, ds.images);
}

TEST(Data, FcdsRoundTripIsByteIdentical) {
  auto dir = scratch("fcds");
  save_dataset((dir / "a.fcds").string(), blobs());
  auto back = load_dataset((dir / "a.fcds").string());
  EXPECT_EQ(back.images, blobs().images);
  EXPECT_EQ(back.labels, blobs().labels);
  EXPECT_EQ(back.num_classes, 4u);
  save_dataset((dir / "b.fcds").string(), back);
  const auto bytes = slurp(dir / "a.fcds");
  EXPECT_EQ(bytes, slurp(dir / "b.fcds"));
  EXPECT_EQ(bytes.size(), 4 + 4 + 8 + 16 + 64 * (2 + 192 * 4));
  EXPECT_EQ(bytes.substr(0, 4), "FCDS");
}

TEST(Data, FcdsRejectsMalformedFiles) {
  std::ostringstream os;
  write_dataset(os, blobs());
  const std::string good = os.str();
  auto parse = [](const std::string& bytes) {
    std::istringstream is(bytes);
    return read_dataset(is);
  };
  EXPECT_NO_THROW(parse(good));
  EXPECT_THROW(parse("FCDX" + good.substr(4)), FormatError);
  std::string v2 = good;
  v2[4] = 2;
  EXPECT_THROW(parse(v2), FormatError);
  EXPECT_THROW(parse(good.substr(0, good.size() - 3)), FormatError);
  EXPECT_THROW(parse(good + "x"), FormatError);
  std::string bad_label = good;
  bad_label[32] = 9;  // first label
  EXPECT_THROW(parse(bad_label), FormatError);
}

TEST(Checkpoint, RoundTripIsByteIdentical) {
  RunState s = init_run(tiny_model(), tiny_train(3), tiny_schedule());
  train_loop(s, blobs());
  const Checkpoint ck = s.to_checkpoint();
  const std::string a = checkpoint_bytes(ck);
  std::istringstream is(a);
  const Checkpoint back = read_checkpoint(is);
  EXPECT_EQ(checkpoint_bytes(back), a);
  const RunState r = RunState::from_checkpoint(back);
  EXPECT_EQ(r.checksum(), s.checksum());
  EXPECT_EQ(r.train, s.train);
  EXPECT_EQ(r.model, s.model);
  EXPECT_EQ(r.opt.step, 3u);
  EXPECT_EQ(a.substr(0, 4), "FCKP");

  auto dir = scratch("ckpt");
  save_checkpoint((dir / "x.fckp").string(), ck);
  save_checkpoint((dir / "y.fckp").string(), load_checkpoint((dir / "x.fckp").string()));
  EXPECT_EQ(slurp(dir / "x.fckp"), slurp(dir / "y.fckp"));
}

TEST(Checkpoint, RejectsTruncationAndForeignArchitecture) {
  RunState s = init_run(tiny_model(), tiny_train(1), tiny_schedule());
  const std::string a = checkpoint_bytes(s.to_checkpoint());
  std::istringstream cut(a.substr(0, a.size() - 1));
  EXPECT_THROW(read_checkpoint(cut), FormatError);
  Checkpoint ck = s.to_checkpoint();
  ck.config["model"]["kernel_size"] = 5;
  EXPECT_THROW(RunState::from_checkpoint(ck), FormatError);
}

TEST(Train, ResumeMatchesUninterruptedRun) {
  const auto dir = scratch("resume");
  RunState full = init_run(tiny_model(), tiny_train(6), tiny_schedule());
  auto r1 = train_loop(full, blobs(), {.out_dir = (dir / "full").string()});
  EXPECT_EQ(r1.status, TrainStatus::completed);

  RunState part = init_run(tiny_model(), tiny_train(6), tiny_schedule());
  auto r2 = train_loop(part, blobs(), {.out_dir = (dir / "part").string(), .stop_at = 3});
  EXPECT_EQ(r2.status, TrainStatus::stopped);
  RunState resumed = RunState::from_checkpoint(load_checkpoint((dir / "part" / "last.fckp").string()));
  EXPECT_EQ(resumed.step, 3u);
  auto r3 = train_loop(resumed, blobs(), {.out_dir = (dir / "part").string()});
  EXPECT_EQ(r3.steps_run, 3u);
  EXPECT_EQ(resumed.checksum(), full.checksum());
  EXPECT_EQ(slurp(dir / "full" / "last.fckp"), slurp(dir / "part" / "last.fckp"));

  for (std::size_t i = 0; i < 3; ++i) {
    EXPECT_EQ(r3.metrics[i].loss, r1.metrics[i + 3].loss);
    EXPECT_EQ(r3.metrics[i].step, r1.metrics[i + 3].step);
  }
  std::ifstream m(dir / "part" / "metrics.csv");
  std::string line;
  std::vector<std::string> rows;
  while (std::getline(m, line)) rows.push_back(line);
  ASSERT_EQ(rows.size(), 7u);
  EXPECT_EQ(rows[0], metrics_header());
  EXPECT_EQ(rows[6].substr(0, 2), "6,");

  auto again = train_loop(resumed, blobs(), {.out_dir = (dir / "part").string()});
  EXPECT_EQ(again.steps_run, 0u);
  EXPECT_EQ(again.status, TrainStatus::completed);
}

TEST(Train, MicroBatchesAndThreadsAreDeterministic) {
  TrainConfig t = tiny_train(2);
  t.micro_batch = 3;
  RunState a = init_run(tiny_model(), t, tiny_schedule());
  RunState b = init_run(tiny_model(), t, tiny_schedule());
  auto ra = train_loop(a, blobs(), {.threads = 1});
  auto rb = train_loop(b, blobs(), {.threads = 3});
  EXPECT_EQ(a.checksum(), b.checksum());
  EXPECT_EQ(ra.metrics[1].loss, rb.metrics[1].loss);
}

TEST(Train, EmaFollowsRecurrenceOnRecordedHistory) {
  TrainConfig t = tiny_train(100);
  t.batch_size = 2;
  RunState s = init_run(tiny_model(), t, tiny_schedule());
  const std::vector<std::pair<std::string, std::size_t>> probes{
      {"stem.w", 5}, {"stage0.block0.pw1.w", 17}, {"head.conv.b", 1}};
  std::vector<double> shadow;
  for (const auto& [name, k] : probes) shadow.push_back(s.ema[name][k]);
  int steps = 0;
  auto res = train_loop(s, blobs(), {.on_step = [&](const RunState& st, const StepResult&) {
                                       for (std::size_t i = 0; i < probes.size(); ++i) {
                                         const double p = st.params[probes[i].first][probes[i].second];
                                         shadow[i] = static_cast<float>(0.9 * shadow[i] + (1 - 0.9) * p);
                                         ASSERT_EQ(float(shadow[i]), st.ema[probes[i].first][probes[i].second]);
                                       }
                                       ++steps;
                                     }});
  EXPECT_EQ(steps, 100);
  EXPECT_EQ(res.metrics.size(), 100u);
}

TEST(Train, NullRowUntouchedWithoutLabelDropout) {
  TrainConfig t = tiny_train(4);
  t.p_uncond = 0;
  RunState s = init_run(tiny_model(), t, tiny_schedule());
  const std::size_t table = s.params.index("y_embed.table");
  const std::size_t d = s.params.tensors()[table].dim(1);
  int checked = 0;
  double live = 0;
  train_loop(s, blobs(), {.on_step = [&](const RunState&, const StepResult& r) {
                            const auto& g = r.grads[table];
                            for (std::size_t k = 0; k < d; ++k) ASSERT_EQ(g[4 * d + k], 0.0f);
                            for (std::size_t k = 0; k < 4 * d; ++k) live += std::abs(g[k]);
                            ++checked;
                          }});
  EXPECT_EQ(checked, 4);
  EXPECT_GT(live, 0);
}

TEST(Train, LabelDropoutReachesNullRow) {
  TrainConfig t = tiny_train(1);
  t.p_uncond = 1;
  const auto plan = plan_step(t, blobs(), 0, 4);
  for (auto y : plan.labels) EXPECT_EQ(y, 4u);
}

TEST(Train, NonFiniteLossAbortsAndKeepsLastCheckpoint) {
  const auto dir = scratch("abort");
  TrainConfig t = tiny_train(6);
  t.checkpoint_interval = 2;
  RunState s = init_run(tiny_model(), t, tiny_schedule());
  auto r = train_loop(s, blobs(), {.out_dir = dir.string(), .stop_at = 2});
  ASSERT_EQ(r.status, TrainStatus::stopped);
  const std::string good = slurp(dir / "last.fckp");
  s.params["head.conv.b"][0] = std::numeric_limits<float>::infinity();
  auto bad = train_loop(s, blobs(), {.out_dir = dir.string()});
  EXPECT_EQ(bad.status, TrainStatus::aborted_nonfinite);
  EXPECT_EQ(bad.steps_run, 0u);
  EXPECT_EQ(s.step, 2u);
  EXPECT_EQ(slurp(dir / "last.fckp"), good);
}

TEST(Train, RejectsMismatchedDatasetAndBadConfig) {
  RunState s = init_run(tiny_model(), tiny_train(1), tiny_schedule());
  EXPECT_THROW(train_loop(s, make_blob_dataset(8, 4, 4, 0)), ShapeError);
  EXPECT_THROW(train_loop(s, make_blob_dataset(8, 8, 5, 0)), ShapeError);
  TrainConfig t;
  t.lr = 0;
  EXPECT_THROW(t.validate(), ConfigError);
  EXPECT_THROW(json({{"lr", 1e-4}, {"bogus", 1}}).get<TrainConfig>(), ConfigError);
  TrainConfig flow = tiny_train(1);
  flow.objective = "flow";
  EXPECT_THROW(init_run(tiny_model(), flow, tiny_schedule()), ConfigError);
}

TEST(Train, ConfigJsonRoundTrip) {
  TrainConfig t = toy_train_config();
  t.objective = "flow";
  t.micro_batch = 16;
  EXPECT_EQ(json(t).get<TrainConfig>(), t);
}

TEST(Train, FlowObjectiveRuns) {
  FcdmConfig m = tiny_model();
  m.learn_sigma = false;
  TrainConfig t = tiny_train(3);
  t.objective = "flow";
  RunState s = init_run(m, t, tiny_schedule());
  auto r = train_loop(s, blobs());
  ASSERT_EQ(r.metrics.size(), 3u);
  for (const auto& row : r.metrics) {
    EXPECT_TRUE(std::isfinite(row.loss));
    EXPECT_EQ(row.l_vlb, 0);
    EXPECT_EQ(row.loss, row.l_simple);
  }
}
