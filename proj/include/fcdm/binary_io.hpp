#pragma once

#include <bit>
#include <cstdint>
#include <cstring>
#include <fstream>
#include <istream>
#include <ostream>
#include <string>
#include <vector>

#include "fcdm/tensor.hpp"

namespace fcdm {

class FormatError : public Error {
 public:
  using Error::Error;
};

namespace io {

template <class U>
void put_le(std::ostream& os, U v) {
  static_assert(std::is_unsigned_v<U>);
  char b[sizeof(U)];
  for (std::size_t i = 0; i < sizeof(U); ++i) b[i] = static_cast<char>((v >> (8 * i)) & 0xff);
  os.write(b, sizeof b);
}

inline void put_f32(std::ostream& os, float f) { put_le(os, std::bit_cast<std::uint32_t>(f)); }

inline void put_f32s(std::ostream& os, const float* p, std::size_t n) {
  if constexpr (std::endian::native == std::endian::little) {
    os.write(reinterpret_cast<const char*>(p), static_cast<std::streamsize>(n * sizeof(float)));
  } else {
    for (std::size_t i = 0; i < n; ++i) put_f32(os, p[i]);
  }
}

/// Reads from a stream and reports short reads as FormatError naming `what`.
class Reader {
 public:
  Reader(std::istream& is, std::string what) : is_(is), what_(std::move(what)) {}

  void bytes(void* dst, std::size_t n, const char* field) {
    is_.read(static_cast<char*>(dst), static_cast<std::streamsize>(n));
    if (static_cast<std::size_t>(is_.gcount()) != n)
      throw FormatError(what_ + ": truncated while reading " + field);
  }

  template <class U>
  U le(const char* field) {
    unsigned char b[sizeof(U)];
    bytes(b, sizeof b, field);
    U v = 0;
    for (std::size_t i = 0; i < sizeof(U); ++i) v |= static_cast<U>(static_cast<U>(b[i]) << (8 * i));
    return v;
  }

  void f32s(float* dst, std::size_t n, const char* field) {
    bytes(dst, n * sizeof(float), field);
    if constexpr (std::endian::native != std::endian::little) {
      auto* b = reinterpret_cast<unsigned char*>(dst);
      for (std::size_t i = 0; i < n; ++i) {
        std::swap(b[4 * i], b[4 * i + 3]);
        std::swap(b[4 * i + 1], b[4 * i + 2]);
      }
    }
  }

  void magic(const char (&expected)[5]) {
    char m[4];
    bytes(m, 4, "magic");
    if (std::memcmp(m, expected, 4) != 0) throw FormatError(what_ + ": bad magic, expected " + expected);
  }

  bool at_end() { return is_.peek() == std::char_traits<char>::eof(); }

 private:
  std::istream& is_;
  std::string what_;
};

inline std::ifstream open_in(const std::string& path) {
  std::ifstream f(path, std::ios::binary);
  if (!f) throw Error("cannot open " + path);
  return f;
}

inline std::ofstream open_out(const std::string& path) {
  std::ofstream f(path, std::ios::binary | std::ios::trunc);
  if (!f) throw Error("cannot write " + path);
  return f;
}

inline std::vector<char> read_file(const std::string& path) {
  auto f = open_in(path);
  return std::vector<char>(std::istreambuf_iterator<char>(f), {});
}

}  // namespace io
}  // namespace fcdm
