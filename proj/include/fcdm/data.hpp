#pragma once

#include <array>
#include <cmath>
#include <cstdint>
#include <string>
#include <vector>

#include "fcdm/binary_io.hpp"
#include "fcdm/rng.hpp"
#include "fcdm/tensor.hpp"

namespace fcdm {

/// Labelled images held as one [N, C, H, W] tensor.
struct Dataset {
  Tensor<float> images;
  std::vector<std::uint16_t> labels;
  std::size_t num_classes = 0;

  std::size_t size() const { return labels.size(); }
  std::size_t channels() const { return images.shape()[1]; }
  std::size_t height() const { return images.shape()[2]; }
  std::size_t width() const { return images.shape()[3]; }
  std::size_t sample_numel() const { return channels() * height() * width(); }

  void validate() const {
    if (images.ndim() != 4) throw ShapeError("dataset: images must be [N, C, H, W], got " + shape_str(images.shape()));
    if (images.shape()[0] != labels.size())
      throw ShapeError("dataset: " + std::to_string(images.shape()[0]) + " images but " +
                       std::to_string(labels.size()) + " labels");
    if (num_classes == 0 || num_classes > 65535) throw Error("dataset: num_classes must lie in [1, 65535]");
    for (std::size_t i = 0; i < labels.size(); ++i)
      if (labels[i] >= num_classes)
        throw Error("dataset: label " + std::to_string(labels[i]) + " of sample " + std::to_string(i) +
                    " is not below num_classes " + std::to_string(num_classes));
  }
};

/// Mirrors the last axis.
template <class T>
Tensor<T> hflip(const Tensor<T>& x) {
  if (x.ndim() == 0) throw ShapeError("hflip: scalar input");
  const std::size_t w = x.shape().back();
  Tensor<T> out(x.shape());
  for (std::size_t r = 0; r < x.numel() / w; ++r)
    for (std::size_t i = 0; i < w; ++i) out[r * w + i] = x[r * w + (w - 1 - i)];
  return out;
}

/// Copies samples `idx` into a batch, mirroring those with flip[i] set.
inline Tensor<float> gather_batch(const Dataset& ds, const std::vector<std::size_t>& idx,
                                  const std::vector<bool>& flip) {
  const std::size_t n = ds.sample_numel(), w = ds.width();
  Tensor<float> out({idx.size(), ds.channels(), ds.height(), w});
  for (std::size_t b = 0; b < idx.size(); ++b) {
    if (idx[b] >= ds.size()) throw Error("gather_batch: index " + std::to_string(idx[b]) + " out of range");
    const float* src = ds.images.data() + idx[b] * n;
    float* dst = out.data() + b * n;
    for (std::size_t r = 0; r < n / w; ++r)
      for (std::size_t i = 0; i < w; ++i) dst[r * w + i] = src[r * w + (flip[b] ? w - 1 - i : i)];
  }
  return out;
}

inline void write_dataset(std::ostream& os, const Dataset& ds) {
  ds.validate();
  os.write("FCDS", 4);
  io::put_le<std::uint32_t>(os, 1);
  io::put_le<std::uint64_t>(os, ds.size());
  io::put_le<std::uint32_t>(os, static_cast<std::uint32_t>(ds.channels()));
  io::put_le<std::uint32_t>(os, static_cast<std::uint32_t>(ds.height()));
  io::put_le<std::uint32_t>(os, static_cast<std::uint32_t>(ds.width()));
  io::put_le<std::uint32_t>(os, static_cast<std::uint32_t>(ds.num_classes));
  for (std::size_t i = 0; i < ds.size(); ++i) {
    io::put_le<std::uint16_t>(os, ds.labels[i]);
    io::put_f32s(os, ds.images.data() + i * ds.sample_numel(), ds.sample_numel());
  }
}

inline Dataset read_dataset(std::istream& is, const std::string& what = "dataset") {
  io::Reader r(is, what);
  r.magic("FCDS");
  const auto version = r.le<std::uint32_t>("version");
  if (version != 1) throw FormatError(what + ": unsupported version " + std::to_string(version));
  const auto count = r.le<std::uint64_t>("count");
  const std::size_t c = r.le<std::uint32_t>("channels");
  const std::size_t h = r.le<std::uint32_t>("height");
  const std::size_t w = r.le<std::uint32_t>("width");
  Dataset ds;
  ds.num_classes = r.le<std::uint32_t>("num_classes");
  if (count == 0 || c == 0 || h == 0 || w == 0)
    throw FormatError(what + ": empty dataset or zero extent in header");
  if (count > (std::uint64_t(1) << 40) / (c * h * w)) throw FormatError(what + ": implausible sample count");
  ds.images = Tensor<float>({static_cast<std::size_t>(count), c, h, w});
  ds.labels.resize(count);
  const std::size_t n = c * h * w;
  for (std::size_t i = 0; i < count; ++i) {
    ds.labels[i] = r.le<std::uint16_t>("label");
    r.f32s(ds.images.data() + i * n, n, "sample payload");
  }
  if (!r.at_end()) throw FormatError(what + ": trailing bytes after " + std::to_string(count) + " samples");
  try {
    ds.validate();
  } catch (const Error& e) {
    throw FormatError(what + ": " + e.what());
  }
  return ds;
}

inline void save_dataset(const std::string& path, const Dataset& ds) {
  auto f = io::open_out(path);
  write_dataset(f, ds);
  if (!f) throw Error("write failed: " + path);
}

inline Dataset load_dataset(const std::string& path) {
  auto f = io::open_in(path);
  return read_dataset(f, path);
}

/// Synthetic class-conditional blobs: each class has its own colour; centre
/// and width vary per sample over a dark, slightly noisy background.
inline Dataset make_blob_dataset(std::size_t count = 2048, std::size_t resolution = 8, std::size_t num_classes = 4,
                                 std::uint64_t seed = 0) {
  if (count == 0 || resolution < 2) throw Error("make_blob_dataset: need count > 0 and resolution >= 2");
  static constexpr std::array<std::array<float, 3>, 6> palette{{
      {0.9f, -0.6f, -0.6f},
      {-0.6f, 0.9f, -0.6f},
      {-0.6f, -0.6f, 0.9f},
      {0.9f, 0.9f, -0.6f},
      {0.9f, -0.6f, 0.9f},
      {-0.6f, 0.9f, 0.9f},
  }};
  if (num_classes == 0 || num_classes > palette.size())
    throw Error("make_blob_dataset: num_classes must lie in [1, " + std::to_string(palette.size()) + "]");
  Rng rng(seed);
  Dataset ds;
  ds.num_classes = num_classes;
  ds.images = Tensor<float>({count, 3, resolution, resolution});
  ds.labels.resize(count);
  const double res = static_cast<double>(resolution);
  for (std::size_t i = 0; i < count; ++i) {
    const auto k = static_cast<std::uint16_t>(rng.below(num_classes));
    ds.labels[i] = k;
    const double cy = res * (0.2 + 0.6 * rng.uniform()), cx = res * (0.2 + 0.6 * rng.uniform());
    const double sigma = res * (0.11 + 0.09 * rng.uniform());
    for (std::size_t y = 0; y < resolution; ++y)
      for (std::size_t x = 0; x < resolution; ++x) {
        const double dy = y + 0.5 - cy, dx = x + 0.5 - cx;
        const double g = std::exp(-(dy * dy + dx * dx) / (2 * sigma * sigma));
        for (std::size_t ch = 0; ch < 3; ++ch) {
          const double bg = -0.8 + 0.05 * rng.normal();
          ds.images.data()[((i * 3 + ch) * resolution + y) * resolution + x] =
              static_cast<float>(bg + (palette[k][ch] - bg) * g);
        }
      }
  }
  return ds;
}

}  // namespace fcdm
