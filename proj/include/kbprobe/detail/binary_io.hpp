#pragma once

#include <bit>
#include <cstdint>
#include <cstring>
#include <istream>
#include <ostream>
#include <span>
#include <string>
#include <vector>

#include "kbprobe/error.hpp"

namespace kbprobe::detail {

// Little-endian fixed-width writers/readers. Reads throw Errc::truncated on
// short input so callers can tell a cut-off file from a malformed one.

template <typename T>
void put_le(std::ostream& out, T value) {
  static_assert(std::is_unsigned_v<T>);
  unsigned char buf[sizeof(T)];
  for (std::size_t i = 0; i < sizeof(T); ++i) buf[i] = static_cast<unsigned char>(value >> (8 * i));
  out.write(reinterpret_cast<const char*>(buf), sizeof(T));
}

inline void put_f32(std::ostream& out, float value) {
  put_le(out, std::bit_cast<std::uint32_t>(value));
}

inline void put_f32s(std::ostream& out, std::span<const float> values) {
  if constexpr (std::endian::native == std::endian::little) {
    out.write(reinterpret_cast<const char*>(values.data()),
              static_cast<std::streamsize>(values.size() * sizeof(float)));
  } else {
    for (float v : values) put_f32(out, v);
  }
}

inline void read_exact(std::istream& in, void* dst, std::size_t n, const char* what) {
  in.read(static_cast<char*>(dst), static_cast<std::streamsize>(n));
  if (static_cast<std::size_t>(in.gcount()) != n) {
    throw Error(Errc::truncated, std::string("truncated file while reading ") + what);
  }
}

template <typename T>
T get_le(std::istream& in, const char* what) {
  static_assert(std::is_unsigned_v<T>);
  unsigned char buf[sizeof(T)];
  read_exact(in, buf, sizeof(T), what);
  T value = 0;
  for (std::size_t i = 0; i < sizeof(T); ++i) value |= static_cast<T>(buf[i]) << (8 * i);
  return value;
}

inline void get_f32s(std::istream& in, std::span<float> dst, const char* what) {
  if constexpr (std::endian::native == std::endian::little) {
    read_exact(in, dst.data(), dst.size() * sizeof(float), what);
  } else {
    for (float& v : dst) v = std::bit_cast<float>(get_le<std::uint32_t>(in, what));
  }
}

inline std::vector<float> get_f32_vector(std::istream& in, std::size_t n, const char* what) {
  std::vector<float> v(n);
  get_f32s(in, v, what);
  return v;
}

}  // namespace kbprobe::detail
