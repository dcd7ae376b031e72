#pragma once

#include <fftw3.h>

#include <cmath>
#include <complex>
#include <mutex>
#include <string>
#include <vector>

#include "fcdm/config.hpp"
#include "fcdm/diffusion.hpp"
#include "fcdm/model.hpp"

namespace fcdm {

namespace detail {

inline bool is_pow2(std::size_t n) { return n && !(n & (n - 1)); }

inline std::mutex& fftw_planner_mutex() {
  static std::mutex m;
  return m;
}

}  // namespace detail

/// |FFT2| over the last two axes of x, computed in double precision.
template <class T>
Tensor<double> fft2_magnitude(const Tensor<T>& x) {
  if (x.ndim() < 2) throw ShapeError("fft2: need at least two axes, got " + shape_str(x.shape()));
  const std::size_t H = x.shape()[x.ndim() - 2], W = x.shape().back();
  if (!detail::is_pow2(H) || !detail::is_pow2(W))
    throw ShapeError("fft2: spatial extents must be powers of two, got " + std::to_string(H) + "x" + std::to_string(W));
  const std::size_t plane = H * W, count = x.numel() / plane;
  fftw_complex* buf = fftw_alloc_complex(x.numel());
  if (!buf) throw Error("fft2: allocation failed");
  for (std::size_t i = 0; i < x.numel(); ++i) {
    buf[i][0] = static_cast<double>(x[i]);
    buf[i][1] = 0;
  }
  fftw_plan plan;
  {
    std::lock_guard lock(detail::fftw_planner_mutex());
    const int n[2] = {static_cast<int>(H), static_cast<int>(W)};
    plan = fftw_plan_many_dft(2, n, static_cast<int>(count), buf, nullptr, 1, static_cast<int>(plane), buf, nullptr, 1,
                              static_cast<int>(plane), FFTW_FORWARD, FFTW_ESTIMATE);
  }
  if (!plan) {
    fftw_free(buf);
    throw Error("fft2: planning failed");
  }
  fftw_execute(plan);
  Tensor<double> out(x.shape());
  for (std::size_t i = 0; i < x.numel(); ++i) out[i] = std::hypot(buf[i][0], buf[i][1]);
  {
    std::lock_guard lock(detail::fftw_planner_mutex());
    fftw_destroy_plan(plan);
  }
  fftw_free(buf);
  return out;
}

/// Sum over channels and frequency bins of log(1 + |FFT2|), averaged over the
/// batch. Input is [N, C, H, W].
template <class T>
double spectral_energy(const Tensor<T>& eps) {
  if (eps.ndim() != 4) throw ShapeError("spectral_energy: expected [N, C, H, W], got " + shape_str(eps.shape()));
  const Tensor<double> mag = fft2_magnitude(eps);
  double total = 0;
  for (double m : mag.values()) total += std::log1p(m);
  return total / double(eps.dim(0));
}

struct SpectralCurve {
  std::vector<std::size_t> timesteps;
  std::vector<double> energy;
  std::size_t samples = 0;
  std::size_t resolution = 0;

  std::string csv() const {
    std::ostringstream os;
    os << "timestep,energy\n" << std::setprecision(10);
    for (std::size_t i = 0; i < timesteps.size(); ++i) os << timesteps[i] << ',' << energy[i] << '\n';
    return os.str();
  }

  json to_json() const {
    return json{{"timesteps", timesteps},
                {"energy", energy},
                {"samples", samples},
                {"resolution", resolution},
                {"reduction", "log(1+|FFT2|) per channel, summed over channels and bins, mean over samples"}};
  }
};

struct SpectralOptions {
  std::size_t stride = 10;
  std::uint64_t seed = 0;
  /// Forward passes are chunked to bound memory.
  std::size_t chunk = 64;
};

/// Energy of the predicted noise on q_sample-noised probes at timesteps
/// 0, stride, 2*stride, ... < T. The same noise draw is reused across t.
template <class T>
SpectralCurve spectral_curve(const Model<T>& m, const NoiseSchedule& s, const Tensor<T>& probes,
                             const std::vector<std::size_t>& labels, const SpectralOptions& opt = {}) {
  if (opt.stride == 0) throw Error("spectral_curve: stride must be >= 1");
  if (probes.ndim() != 4 || labels.size() != probes.dim(0))
    throw ShapeError("spectral_curve: probes " + shape_str(probes.shape()) + " with " + std::to_string(labels.size()) +
                     " labels");
  const std::size_t N = probes.dim(0), per = probes.numel() / N;
  Rng rng(opt.seed);
  const Tensor<T> eps = randn<T>(rng, probes.shape());
  SpectralCurve curve;
  curve.samples = N;
  curve.resolution = probes.dim(3);
  for (std::size_t t = 0; t < s.size(); t += opt.stride) {
    double total = 0;
    for (std::size_t lo = 0; lo < N; lo += opt.chunk) {
      const std::size_t n = std::min(opt.chunk, N - lo);
      Shape cs = probes.shape();
      cs[0] = n;
      Tensor<T> x0(cs), e(cs);
      std::copy_n(probes.data() + lo * per, n * per, x0.data());
      std::copy_n(eps.data() + lo * per, n * per, e.data());
      const std::vector<std::size_t> tt(n, t);
      const Tensor<T> xt = q_sample(x0, tt, e, s);
      const std::vector<double> tin(n, s.timesteps[t]);
      const std::vector<std::size_t> y(labels.begin() + lo, labels.begin() + lo + n);
      total += spectral_energy(predict(m, xt, tin, y).eps) * double(n);
    }
    curve.timesteps.push_back(t);
    curve.energy.push_back(total / double(N));
  }
  return curve;
}

}  // namespace fcdm
