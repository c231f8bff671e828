#pragma once

#include <cstdint>
#include <initializer_list>
#include <random>
#include <string_view>

namespace fedalign {

using Rng = std::mt19937_64;

inline std::uint64_t splitmix64(std::uint64_t x) {
  x += 0x9e3779b97f4a7c15ULL;
  x = (x ^ (x >> 30)) * 0xbf58476d1ce4e5b9ULL;
  x = (x ^ (x >> 27)) * 0x94d049bb133111ebULL;
  return x ^ (x >> 31);
}

/// Seed for a named child stream of `root`, optionally indexed (round, client, ...).
inline std::uint64_t derive_seed(std::uint64_t root, std::string_view name,
                                 std::initializer_list<std::uint64_t> indices = {}) {
  // FNV-1a over the stream name
  std::uint64_t h = 0xcbf29ce484222325ULL;
  for (char c : name) {
    h ^= static_cast<unsigned char>(c);
    h *= 0x100000001b3ULL;
  }
  std::uint64_t s = splitmix64(root ^ splitmix64(h));
  for (auto i : indices) s = splitmix64(s ^ splitmix64(i + 0x632be59bd9b4e019ULL));
  return s;
}

inline Rng make_stream(std::uint64_t root, std::string_view name,
                       std::initializer_list<std::uint64_t> indices = {}) {
  return Rng(derive_seed(root, name, indices));
}

}  // namespace fedalign
