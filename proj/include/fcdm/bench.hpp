#pragma once

#include <algorithm>
#include <chrono>
#include <fstream>
#include <string>
#include <thread>
#include <vector>

#include "fcdm/model.hpp"
#include "fcdm/threads.hpp"

namespace fcdm {

struct BenchOptions {
  std::size_t batch = 64;
  std::size_t iterations = 10;
  std::size_t warmup = 3;
  /// Workers splitting each batch; 1 keeps the forward single-threaded.
  std::size_t threads = 1;
  std::uint64_t seed = 0;
};

struct BenchReport {
  double samples_per_second = 0;
  double p50_ms = 0, p90_ms = 0, max_ms = 0;
  std::vector<double> latencies_ms;
  std::string hardware;
  BenchOptions options;
  FcdmConfig config;

  json to_json() const {
    return json{{"samples_per_second", samples_per_second},
                {"latency_ms", {{"p50", p50_ms}, {"p90", p90_ms}, {"max", max_ms}}},
                {"hardware", hardware},
                {"batch", options.batch},
                {"iterations", options.iterations},
                {"warmup", options.warmup},
                {"threads", options.threads},
                {"config", config}};
  }
};

inline std::string hardware_descriptor() {
  std::string cpu = "unknown cpu";
  if (std::ifstream f("/proc/cpuinfo"); f) {
    std::string line;
    while (std::getline(f, line))
      if (line.rfind("model name", 0) == 0) {
        cpu = line.substr(line.find(':') + 2);
        break;
      }
  }
  return cpu + ", " + std::to_string(std::thread::hardware_concurrency()) + " hardware threads";
}

namespace detail {

inline double percentile(std::vector<double> v, double q) {
  std::sort(v.begin(), v.end());
  const double pos = q * double(v.size() - 1);
  const std::size_t lo = static_cast<std::size_t>(pos);
  const std::size_t hi = std::min(lo + 1, v.size() - 1);
  return v[lo] + (pos - double(lo)) * (v[hi] - v[lo]);
}

}  // namespace detail

/// Forward-only wall-clock throughput on random inputs.
template <class T>
BenchReport throughput_bench(const Model<T>& m, const BenchOptions& o) {
  if (o.iterations == 0) throw Error("bench: iterations must be >= 1");
  if (o.batch == 0) throw Error("bench: batch must be >= 1");
  if (o.warmup < 3) throw Error("bench: warmup must be >= 3");
  Rng rng(o.seed);
  const std::size_t R = m.cfg.input_resolution, C = m.cfg.in_channels;
  const Tensor<T> x = randn<T>(rng, {o.batch, C, R, R});
  std::vector<double> t(o.batch);
  std::vector<std::size_t> y(o.batch);
  for (std::size_t i = 0; i < o.batch; ++i) {
    t[i] = double(rng.below(1000));
    y[i] = rng.below(m.cfg.num_classes);
  }
  const std::size_t workers = std::min(std::max<std::size_t>(o.threads, 1), o.batch);
  const std::size_t chunk = (o.batch + workers - 1) / workers, per = C * R * R;
  auto run = [&] {
    parallel_for((o.batch + chunk - 1) / chunk, workers, [&](std::size_t k) {
      const std::size_t lo = k * chunk, n = std::min(chunk, o.batch - lo);
      Tensor<T> xs({n, C, R, R});
      std::copy_n(x.data() + lo * per, n * per, xs.data());
      predict(m, xs, std::vector<double>(t.begin() + lo, t.begin() + lo + n),
              std::vector<std::size_t>(y.begin() + lo, y.begin() + lo + n));
    });
  };
  for (std::size_t i = 0; i < o.warmup; ++i) run();
  BenchReport r;
  r.options = o;
  r.config = m.cfg;
  r.hardware = hardware_descriptor();
  double total = 0;
  for (std::size_t i = 0; i < o.iterations; ++i) {
    const auto a = std::chrono::steady_clock::now();
    run();
    const double s = std::chrono::duration<double>(std::chrono::steady_clock::now() - a).count();
    total += s;
    r.latencies_ms.push_back(1e3 * s);
  }
  r.samples_per_second = double(o.batch * o.iterations) / total;
  r.p50_ms = detail::percentile(r.latencies_ms, 0.5);
  r.p90_ms = detail::percentile(r.latencies_ms, 0.9);
  r.max_ms = *std::max_element(r.latencies_ms.begin(), r.latencies_ms.end());
  return r;
}

}  // namespace fcdm
