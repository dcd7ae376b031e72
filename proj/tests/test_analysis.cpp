#include <gtest/gtest.h>

#include <complex>
#include <filesystem>
#include <fstream>

#include "fcdm/bench.hpp"
#include "fcdm/features.hpp"
#include "fcdm/fid.hpp"
#include "fcdm/spectral.hpp"

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

/// Fresh model with every zero-initialised tensor filled, so all paths are live.
Model<float> live_model(const FcdmConfig& cfg, std::uint64_t seed) {
  Rng rng(seed);
  Model<float> m = build_model<float>(cfg, rng);
  for (auto& t : m.params.tensors()) {
    bool zero = true;
    for (float v : t.values()) zero = zero && v == 0;
    if (zero)
      for (auto& v : t.values()) v = static_cast<float>(0.2 * rng.normal());
  }
  return m;
}

/// Direct O(N^4) DFT magnitude of one H x W plane.
std::vector<double> naive_dft_magnitude(const double* x, std::size_t H, std::size_t W) {
  std::vector<double> out(H * W);
  const long double tau = 2 * 3.14159265358979323846264338327950288L;
  for (std::size_t u = 0; u < H; ++u)
    for (std::size_t v = 0; v < W; ++v) {
      std::complex<long double> acc = 0;
      for (std::size_t i = 0; i < H; ++i)
        for (std::size_t j = 0; j < W; ++j) {
          const long double ang = -tau * ((long double)(u * i) / H + (long double)(v * j) / W);
          acc += (long double)x[i * W + j] * std::complex<long double>(std::cos(ang), std::sin(ang));
        }
      out[u * W + v] = double(std::abs(acc));
    }
  return out;
}

Tensor<double> roll(const Tensor<double>& x, std::size_t dy, std::size_t dx) {
  Tensor<double> out(x.shape());
  const std::size_t N = x.dim(0), C = x.dim(1), H = x.dim(2), W = x.dim(3);
  for (std::size_t n = 0; n < N; ++n)
    for (std::size_t c = 0; c < C; ++c)
      for (std::size_t i = 0; i < H; ++i)
        for (std::size_t j = 0; j < W; ++j) out.at(n, c, (i + dy) % H, (j + dx) % W) = x.at(n, c, i, j);
  return out;
}

std::string head_bytes(const fs::path& p, std::size_t n) {
  std::ifstream f(p, std::ios::binary);
  std::string s(n, '\0');
  f.read(s.data(), static_cast<std::streamsize>(n));
  return s;
}

}  // namespace

TEST(Spectral, FftMatchesNaiveDft) {
  Rng rng(4);
  const auto x = randn<double>(rng, {2, 3, 8, 8});
  const auto mag = fft2_magnitude(x);
  double worst = 0;
  for (std::size_t p = 0; p < 6; ++p) {
    const auto ref = naive_dft_magnitude(x.data() + p * 64, 8, 8);
    for (std::size_t k = 0; k < 64; ++k)
      worst = std::max(worst, std::abs(mag[p * 64 + k] - ref[k]) / std::max(ref[k], 1e-12));
  }
  EXPECT_LT(worst, 1e-6);

  const auto rect = randn<double>(rng, {1, 1, 4, 16});
  const auto rm = fft2_magnitude(rect);
  const auto rref = naive_dft_magnitude(rect.data(), 4, 16);
  for (std::size_t k = 0; k < 64; ++k) EXPECT_NEAR(rm[k], rref[k], 1e-9 * std::max(1.0, rref[k]));
}

TEST(Spectral, RejectsNonPowerOfTwo) {
  EXPECT_THROW(fft2_magnitude(Tensor<double>({1, 1, 6, 8})), ShapeError);
  EXPECT_THROW(spectral_energy(Tensor<double>({1, 1, 8, 12})), ShapeError);
  EXPECT_THROW(spectral_energy(Tensor<double>({8, 8})), ShapeError);
}

TEST(Spectral, ZeroAndConstantImages) {
  EXPECT_EQ(spectral_energy(Tensor<double>({3, 2, 8, 8})), 0.0);
  for (double c : {0.5, 2.0}) {
    const std::size_t N = 8;
    EXPECT_NEAR(spectral_energy(Tensor<double>({1, 1, N, N}, c)), std::log(1 + N * N * c), 1e-12);
  }
}

TEST(Spectral, TranslationInvarianceAndBatchMean) {
  Rng rng(7);
  const auto x = randn<double>(rng, {2, 3, 8, 8});
  const double e = spectral_energy(x);
  EXPECT_NEAR(spectral_energy(roll(x, 3, 5)), e, 1e-10 * e);
  EXPECT_NEAR(spectral_energy(roll(x, 7, 0)), e, 1e-10 * e);
  Tensor<double> a({1, 3, 8, 8}, std::vector<double>(x.data(), x.data() + 192));
  Tensor<double> b({1, 3, 8, 8}, std::vector<double>(x.data() + 192, x.data() + 384));
  EXPECT_NEAR(e, 0.5 * (spectral_energy(a) + spectral_energy(b)), 1e-10 * e);
}

TEST(Spectral, CurveOnModelIsFiniteAndNonNegative) {
  const auto m = live_model(tiny_model(), 3);
  const auto s = make_schedule({100, "linear"});
  Rng rng(1);
  const auto probes = randn<float>(rng, {6, 3, 8, 8});
  const SpectralCurve c = spectral_curve(m, s, probes, {0, 1, 2, 3, 0, 1}, {.stride = 10, .seed = 2, .chunk = 4});
  ASSERT_EQ(c.energy.size(), 10u);
  EXPECT_EQ(c.timesteps.front(), 0u);
  EXPECT_EQ(c.timesteps.back(), 90u);
  for (double e : c.energy) {
    EXPECT_TRUE(std::isfinite(e));
    EXPECT_GE(e, 0);
  }
  EXPECT_EQ(c.samples, 6u);
  const auto again = spectral_curve(m, s, probes, {0, 1, 2, 3, 0, 1}, {.stride = 10, .seed = 2, .chunk = 6});
  for (std::size_t i = 0; i < c.energy.size(); ++i) EXPECT_NEAR(again.energy[i], c.energy[i], 1e-5 * c.energy[i]);
  EXPECT_NE(c.csv().find("timestep,energy"), std::string::npos);
}

TEST(Features, CorrelationOfDuplicatedAndIndependentChannels) {
  Rng rng(5);
  const auto base = randn<double>(rng, {1, 6, 6});
  Tensor<double> dup({4, 6, 6});
  for (std::size_t c = 0; c < 4; ++c)
    for (std::size_t i = 0; i < 36; ++i) dup[c * 36 + i] = base[i];
  EXPECT_NEAR(mean_abs_channel_correlation(dup), 1.0, 1e-12);
  const auto indep = randn<double>(rng, {16, 32, 32});
  EXPECT_LT(mean_abs_channel_correlation(indep), 0.05);
  Tensor<double> with_const = dup;
  for (std::size_t i = 0; i < 36; ++i) with_const[i] = 3.0;
  EXPECT_NEAR(mean_abs_channel_correlation(with_const), 1.0, 1e-12);
}

TEST(Features, GrnDoesNotRaiseCorrelationOfDuplicatedChannels) {
  Rng rng(8);
  ParamStore<double> ps;
  declare_grn(ps, "g", 8);
  for (auto& t : ps.tensors())
    for (auto& v : t.values()) v = rng.normal();
  const auto base = randn<double>(rng, {1, 1, 5, 5});
  Tensor<double> x({1, 8, 5, 5});
  for (std::size_t c = 0; c < 8; ++c)
    for (std::size_t i = 0; i < 25; ++i) x[c * 25 + i] = base[i];
  Tape<double> tape;
  Binder<double> p(tape, ps);
  const auto y = grn(p, "g", tape.constant(x)).value().reshaped({8, 5, 5});
  EXPECT_LE(mean_abs_channel_correlation(y), mean_abs_channel_correlation(x.reshaped({8, 5, 5})) + 1e-9);
}

TEST(Features, ChannelGridDimensions) {
  Rng rng(2);
  const auto x = randn<float>(rng, {64, 4, 5});
  const Image g = channel_grid(x);
  EXPECT_EQ(g.width, 8u * 5);
  EXPECT_EQ(g.height, 8u * 4);
  const Image big = channel_grid(randn<float>(rng, {96, 4, 4}));
  EXPECT_EQ(big.width, 32u);
  EXPECT_EQ(big.height, 32u);
  const Image few = channel_grid(randn<float>(rng, {3, 4, 4}));
  EXPECT_EQ(few.width, 12u);
  EXPECT_EQ(few.height, 4u);
  // Each tile spans the full byte range after its own min-max scaling.
  std::uint8_t lo = 255, hi = 0;
  for (std::size_t y = 0; y < 4; ++y)
    for (std::size_t xx = 0; xx < 5; ++xx) {
      lo = std::min(lo, g.pixels[y * g.width + xx]);
      hi = std::max(hi, g.pixels[y * g.width + xx]);
    }
  EXPECT_EQ(lo, 0);
  EXPECT_EQ(hi, 255);
}

TEST(Features, GrnDumpCapturesSelectedBlockAndWritesFiles) {
  const auto cfg = tiny_model();
  const auto m = live_model(cfg, 9);
  Rng rng(3);
  const auto x = randn<float>(rng, {2, 3, 8, 8});
  const GrnDump d = grn_feature_dump(m, x, {10, 500}, {1, 2}, 1, 0, 1);
  EXPECT_EQ(d.pre.shape(), (Shape{48, 4, 4}));
  EXPECT_EQ(d.post.shape(), d.pre.shape());
  EXPECT_GE(d.pre_correlation, 0);
  EXPECT_LE(d.pre_correlation, 1);
  EXPECT_THROW(grn_feature_dump(m, x, {10, 500}, {1, 2}, 5, 0), Error);
  EXPECT_THROW(grn_feature_dump(m, x, {10, 500}, {1, 2}, 0, 3), Error);
  FcdmConfig no_grn = cfg;
  no_grn.channel_norm = "cca";
  Rng r2(1);
  EXPECT_THROW(grn_feature_dump(build_model<float>(no_grn, r2), x, {1, 1}, {0, 0}, 0, 0), Error);

  const fs::path dir = fs::temp_directory_path() / "fcdm_test_grn_dump";
  fs::remove_all(dir);
  write_grn_dump(dir.string(), d);
  EXPECT_EQ(head_bytes(dir / "stage1_block0_pre_grn.png", 8), "\x89PNG\r\n\x1a\n");
  EXPECT_EQ(head_bytes(dir / "stage1_block0_post_grn.pgm", 2), "P5");
  EXPECT_TRUE(fs::exists(dir / "stage1_block0_grn.json"));
}

TEST(Fid, IdenticalSymmetricAndShifted) {
  Rng rng(6);
  const auto a = randn<float>(rng, {300, 3, 8, 8});
  const auto b = rand_uniform<float>(rng, {200, 3, 8, 8}, -1, 1);
  EXPECT_LT(toy_fid(a, a), 1e-6);
  EXPECT_NEAR(toy_fid(a, b), toy_fid(b, a), 1e-6);
  EXPECT_GE(toy_fid(a, b), 0);
  // A constant offset moves every pooled feature mean by delta and leaves the
  // covariance unchanged.
  Tensor<double> shifted = a.cast<double>();
  for (auto& v : shifted.values()) v += 0.3;
  EXPECT_NEAR(toy_fid(a, shifted), 48 * 0.09, 1e-6);
}

TEST(Fid, GaussianMeanOffsetClosedForm) {
  Rng rng(12);
  const std::size_t n = 20000, d = 6;
  Eigen::MatrixXd fa(n, d), fb(n, d);
  for (std::size_t i = 0; i < n; ++i)
    for (std::size_t j = 0; j < d; ++j) {
      fa(i, j) = rng.normal();
      fb(i, j) = rng.normal() + 0.5;
    }
  EXPECT_NEAR(frechet_distance(fa, fb), d * 0.25, 0.05);
}

TEST(Fid, Errors) {
  Rng rng(1);
  EXPECT_THROW(toy_fid(randn<float>(rng, {1, 3, 8, 8}), randn<float>(rng, {5, 3, 8, 8})), Error);
  EXPECT_THROW(toy_fid(randn<float>(rng, {4, 3, 8, 8}), randn<float>(rng, {4, 3, 4, 4})), ShapeError);
  EXPECT_THROW(toy_fid(randn<float>(rng, {4, 3, 7, 7}), randn<float>(rng, {4, 3, 7, 7})), ShapeError);
}

TEST(Images, PngAndPnmHeaders) {
  const fs::path dir = fs::temp_directory_path() / "fcdm_test_images";
  fs::create_directories(dir);
  Rng rng(2);
  const Image rgb = sample_grid(randn<float>(rng, {5, 3, 8, 8}), 4);
  EXPECT_EQ(rgb.width, 32u);
  EXPECT_EQ(rgb.height, 16u);
  EXPECT_EQ(rgb.channels, 3u);
  write_png((dir / "s.png").string(), rgb);
  write_pnm((dir / "s.ppm").string(), rgb);
  EXPECT_EQ(head_bytes(dir / "s.png", 8), "\x89PNG\r\n\x1a\n");
  EXPECT_EQ(head_bytes(dir / "s.ppm", 11), "P6\n32 16\n25");
  EXPECT_EQ(fs::file_size(dir / "s.ppm"), 13u + 32 * 16 * 3);
}

TEST(Bench, ReportsAndRejectsBadOptions) {
  Rng rng(0);
  const auto m = build_model<float>(tiny_model(), rng);
  EXPECT_THROW(throughput_bench(m, {.batch = 4, .iterations = 0}), Error);
  EXPECT_THROW(throughput_bench(m, {.batch = 4, .iterations = 2, .warmup = 2}), Error);
  const auto r = throughput_bench(m, {.batch = 4, .iterations = 5});
  EXPECT_GT(r.samples_per_second, 0);
  EXPECT_EQ(r.latencies_ms.size(), 5u);
  EXPECT_LE(r.p50_ms, r.max_ms);
  EXPECT_FALSE(r.hardware.empty());
  EXPECT_EQ(r.to_json()["batch"], 4);
  const auto threaded = throughput_bench(m, {.batch = 4, .iterations = 2, .threads = 2});
  EXPECT_GT(threaded.samples_per_second, 0);
}
