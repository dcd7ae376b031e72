#pragma once

#include <png.h>

#include <algorithm>
#include <cstdio>
#include <cstdint>
#include <fstream>
#include <memory>
#include <string>
#include <vector>

#include "fcdm/tensor.hpp"

namespace fcdm {

/// 8-bit image, row-major, `channels` interleaved (1 = gray, 3 = RGB).
struct Image {
  std::size_t width = 0, height = 0, channels = 1;
  std::vector<std::uint8_t> pixels;

  Image() = default;
  Image(std::size_t w, std::size_t h, std::size_t c) : width(w), height(h), channels(c), pixels(w * h * c) {}

  std::uint8_t& at(std::size_t x, std::size_t y, std::size_t c = 0) { return pixels[(y * width + x) * channels + c]; }
};

inline void write_pnm(const std::string& path, const Image& img) {
  if (img.channels != 1 && img.channels != 3) throw Error("write_pnm: need 1 or 3 channels");
  std::ofstream f(path, std::ios::binary);
  if (!f) throw Error("cannot write " + path);
  f << (img.channels == 1 ? "P5" : "P6") << '\n' << img.width << ' ' << img.height << "\n255\n";
  f.write(reinterpret_cast<const char*>(img.pixels.data()), static_cast<std::streamsize>(img.pixels.size()));
  if (!f) throw Error("write failed: " + path);
}

inline void write_png(const std::string& path, const Image& img) {
  if (img.channels != 1 && img.channels != 3) throw Error("write_png: need 1 or 3 channels");
  std::unique_ptr<FILE, int (*)(FILE*)> fp(std::fopen(path.c_str(), "wb"), &std::fclose);
  if (!fp) throw Error("cannot write " + path);
  png_structp png = png_create_write_struct(PNG_LIBPNG_VER_STRING, nullptr, nullptr, nullptr);
  png_infop info = png ? png_create_info_struct(png) : nullptr;
  if (!info) {
    png_destroy_write_struct(&png, nullptr);
    throw Error("write_png: libpng initialisation failed");
  }
  if (setjmp(png_jmpbuf(png))) {
    png_destroy_write_struct(&png, &info);
    throw Error("write_png: libpng failed writing " + path);
  }
  png_init_io(png, fp.get());
  png_set_IHDR(png, info, static_cast<png_uint_32>(img.width), static_cast<png_uint_32>(img.height), 8,
               img.channels == 1 ? PNG_COLOR_TYPE_GRAY : PNG_COLOR_TYPE_RGB, PNG_INTERLACE_NONE,
               PNG_COMPRESSION_TYPE_DEFAULT, PNG_FILTER_TYPE_DEFAULT);
  png_write_info(png, info);
  for (std::size_t y = 0; y < img.height; ++y)
    png_write_row(png, const_cast<png_bytep>(img.pixels.data() + y * img.width * img.channels));
  png_write_end(png, nullptr);
  png_destroy_write_struct(&png, &info);
}

namespace detail {

inline std::uint8_t to_byte(double v, double lo, double hi) {
  const double u = hi > lo ? (v - lo) / (hi - lo) : 0.0;
  return static_cast<std::uint8_t>(std::lround(std::clamp(u, 0.0, 1.0) * 255.0));
}

}  // namespace detail

/// Tiles the first `max_channels` planes of x [C, H, W] into a grayscale grid
/// with `cols` tiles per row, each plane min-max normalised on its own.
template <class T>
Image channel_grid(const Tensor<T>& x, std::size_t cols = 8, std::size_t max_channels = 64) {
  if (x.ndim() != 3) throw ShapeError("channel_grid: expected [C, H, W], got " + shape_str(x.shape()));
  if (cols == 0) throw Error("channel_grid: cols must be >= 1");
  const std::size_t C = std::min(x.dim(0), max_channels), H = x.dim(1), W = x.dim(2);
  const std::size_t gc = std::min(cols, C), rows = (C + gc - 1) / gc;
  Image img(gc * W, rows * H, 1);
  for (std::size_t c = 0; c < C; ++c) {
    const T* p = x.data() + c * H * W;
    const auto [lo, hi] = std::minmax_element(p, p + H * W);
    for (std::size_t y = 0; y < H; ++y)
      for (std::size_t xx = 0; xx < W; ++xx)
        img.at((c % gc) * W + xx, (c / gc) * H + y) = detail::to_byte(p[y * W + xx], *lo, *hi);
  }
  return img;
}

/// RGB grid of samples x [N, 3, H, W] (or gray for one channel), mapped with
/// one global min-max over the whole batch.
template <class T>
Image sample_grid(const Tensor<T>& x, std::size_t cols = 8) {
  if (x.ndim() != 4 || (x.dim(1) != 1 && x.dim(1) != 3))
    throw ShapeError("sample_grid: expected [N, 1|3, H, W], got " + shape_str(x.shape()));
  if (cols == 0) throw Error("sample_grid: cols must be >= 1");
  const std::size_t N = x.dim(0), C = x.dim(1), H = x.dim(2), W = x.dim(3);
  const std::size_t gc = std::min(cols, N), rows = (N + gc - 1) / gc;
  const auto [lo, hi] = std::minmax_element(x.data(), x.data() + x.numel());
  Image img(gc * W, rows * H, C);
  for (std::size_t n = 0; n < N; ++n)
    for (std::size_t c = 0; c < C; ++c)
      for (std::size_t y = 0; y < H; ++y)
        for (std::size_t xx = 0; xx < W; ++xx)
          img.at((n % gc) * W + xx, (n / gc) * H + y, c) = detail::to_byte(x.at(n, c, y, xx), *lo, *hi);
  return img;
}

}  // namespace fcdm
