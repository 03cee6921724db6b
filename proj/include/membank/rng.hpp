#pragma once

#include <cmath>
#include <cstdint>
#include <numbers>
#include <string_view>

namespace membank {

// Frozen pseudo-random primitives. Bank files record the encoder version
// that depends on these, so the algorithms below must never change:
//
//   mix64(z)      SplitMix64 finalizer (Steele, Lea, Flood 2014):
//                 z += 0x9E3779B97F4A7C15
//                 z = (z ^ (z >> 30)) * 0xBF58476D1CE4E5B9
//                 z = (z ^ (z >> 27)) * 0x94D049BB133111EB
//                 return z ^ (z >> 31)
//   fnv1a64(b)    64-bit FNV-1a over the raw bytes.
//   stream key    mix64(seed ^ fnv1a64(label bytes))
//   draw i        mix64(key + i * 0x9E3779B97F4A7C15), i = 0, 1, 2, ...
//   unit(u)       (u >> 11) * 2^-53            in [0, 1)
//   symmetric(u)  2 * unit(u) - 1              in [-1, 1)
//
// Draw i is a pure function of (key, i), so streams are counter-based and can
// be split by deriving child keys.

inline constexpr std::uint64_t kGolden = 0x9E3779B97F4A7C15ULL;

constexpr std::uint64_t mix64(std::uint64_t z) noexcept {
  z += kGolden;
  z = (z ^ (z >> 30)) * 0xBF58476D1CE4E5B9ULL;
  z = (z ^ (z >> 27)) * 0x94D049BB133111EBULL;
  return z ^ (z >> 31);
}

constexpr std::uint64_t fnv1a64(std::string_view bytes) noexcept {
  std::uint64_t h = 0xCBF29CE484222325ULL;
  for (char c : bytes) {
    h ^= static_cast<unsigned char>(c);
    h *= 0x100000001B3ULL;
  }
  return h;
}

class CounterStream {
 public:
  constexpr explicit CounterStream(std::uint64_t key) noexcept : key_(key) {}

  static constexpr CounterStream keyed(std::uint64_t seed, std::string_view label) noexcept {
    return CounterStream(mix64(seed ^ fnv1a64(label)));
  }

  constexpr std::uint64_t key() const noexcept { return key_; }

  constexpr std::uint64_t bits(std::uint64_t i) const noexcept { return mix64(key_ + i * kGolden); }

  constexpr double unit(std::uint64_t i) const noexcept {
    return static_cast<double>(bits(i) >> 11) * 0x1.0p-53;
  }

  constexpr double symmetric(std::uint64_t i) const noexcept { return 2.0 * unit(i) - 1.0; }

  // Child stream for an integer sub-key.
  constexpr CounterStream child(std::uint64_t sub) const noexcept { return CounterStream(mix64(key_ ^ mix64(sub))); }

  // Standard normal via Box-Muller on draws 2i and 2i+1.
  double normal(std::uint64_t i) const noexcept {
    const double u1 = 1.0 - unit(2 * i);  // (0, 1]
    const double u2 = unit(2 * i + 1);
    return std::sqrt(-2.0 * std::log(u1)) * std::cos(2.0 * std::numbers::pi * u2);
  }

 private:
  std::uint64_t key_;
};

// Sequential wrapper for code that just needs "the next number".
class SeqRng {
 public:
  explicit SeqRng(CounterStream stream) noexcept : stream_(stream) {}
  SeqRng(std::uint64_t seed, std::string_view label) noexcept : stream_(CounterStream::keyed(seed, label)) {}

  double unit() noexcept { return stream_.unit(next_++); }
  double symmetric() noexcept { return stream_.symmetric(next_++); }
  double normal() noexcept {
    const double v = stream_.normal(normal_next_++);
    return v;
  }
  // Uniform integer in [0, n) by rejection-free multiply-shift; n > 0.
  std::uint64_t below(std::uint64_t n) noexcept {
    const unsigned __int128 p = static_cast<unsigned __int128>(stream_.bits(next_++)) * n;
    return static_cast<std::uint64_t>(p >> 64);
  }

 private:
  CounterStream stream_;
  std::uint64_t next_ = 0;
  std::uint64_t normal_next_ = std::uint64_t{1} << 62;
};

}  // namespace membank
