#pragma once

// Little-endian primitives shared by the checkpoint and upload formats.

#include <bit>
#include <cstdint>
#include <istream>
#include <ostream>
#include <stdexcept>
#include <string>

namespace fedalign::detail {

inline void put_u32(std::ostream& out, std::uint32_t v) {
  for (int i = 0; i < 4; ++i) out.put(static_cast<char>((v >> (8 * i)) & 0xffu));
}

inline void put_f64(std::ostream& out, double v) {
  const auto bits = std::bit_cast<std::uint64_t>(v);
  for (int i = 0; i < 8; ++i) out.put(static_cast<char>((bits >> (8 * i)) & 0xffu));
}

inline std::uint32_t get_u32(std::istream& in, const std::string& what) {
  std::uint32_t v = 0;
  for (int i = 0; i < 4; ++i) {
    const int c = in.get();
    if (c == std::char_traits<char>::eof()) throw std::runtime_error(what + ": truncated");
    v |= static_cast<std::uint32_t>(c & 0xff) << (8 * i);
  }
  return v;
}

inline double get_f64(std::istream& in, const std::string& what) {
  std::uint64_t bits = 0;
  for (int i = 0; i < 8; ++i) {
    const int c = in.get();
    if (c == std::char_traits<char>::eof()) throw std::runtime_error(what + ": truncated");
    bits |= static_cast<std::uint64_t>(c & 0xff) << (8 * i);
  }
  return std::bit_cast<double>(bits);
}

}  // namespace fedalign::detail
