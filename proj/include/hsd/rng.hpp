#pragma once

#include <cstdint>
#include <initializer_list>
#include <stdexcept>

namespace hsd {

// SplitMix64 finalizer; bijective 64-bit mixer.
constexpr std::uint64_t mix64(std::uint64_t z) noexcept {
  z += 0x9e3779b97f4a7c15ULL;
  z = (z ^ (z >> 30)) * 0xbf58476d1ce4e5b9ULL;
  z = (z ^ (z >> 27)) * 0x94d049bb133111ebULL;
  return z ^ (z >> 31);
}

/// Counter-based random stream. Output i of a stream is a pure function of
/// (key, i), so a stream can be rebuilt anywhere from its key and position.
/// Streams for independent work items are derived with `derive()`, which
/// keeps results independent of scheduling and worker count.
class RngStream {
 public:
  constexpr RngStream() = default;
  constexpr explicit RngStream(std::uint64_t key, std::uint64_t counter = 0)
      : key_(key), counter_(counter) {}

  /// Stream keyed by (seed, a, b, ...).
  static constexpr RngStream derive(std::uint64_t seed, std::initializer_list<std::uint64_t> path) {
    std::uint64_t k = mix64(seed ^ 0x5851f42d4c957f2dULL);
    for (auto p : path) k = mix64(k ^ mix64(p + 0x632be59bd9b4e019ULL));
    return RngStream(k);
  }

  /// Child stream; depends on the parent's key, current position and `tag`.
  [[nodiscard]] constexpr RngStream split(std::uint64_t tag) const {
    return RngStream(mix64(key_ ^ mix64(counter_ * 0xd1b54a32d192ed03ULL + tag) ^ 0xa0761d6478bd642fULL));
  }

  constexpr std::uint64_t next_u64() noexcept {
    return mix64(key_ ^ mix64(counter_++ ^ 0xe7037ed1a0b428dbULL));
  }

  /// Uniform double in [0, 1) with 53 random bits.
  constexpr double uniform() noexcept {
    return static_cast<double>(next_u64() >> 11) * 0x1.0p-53;
  }

  /// Uniform integer in [0, n). Rejection sampling, no modulo bias.
  std::uint64_t uniform_int(std::uint64_t n) {
    if (n == 0) throw std::invalid_argument("uniform_int: empty range");
    const std::uint64_t limit = ~std::uint64_t{0} - (~std::uint64_t{0} % n);
    for (;;) {
      const std::uint64_t x = next_u64();
      if (x < limit) return x % n;
    }
  }

  [[nodiscard]] constexpr std::uint64_t key() const noexcept { return key_; }
  [[nodiscard]] constexpr std::uint64_t counter() const noexcept { return counter_; }

  friend constexpr bool operator==(const RngStream&, const RngStream&) = default;

 private:
  std::uint64_t key_ = 0;
  std::uint64_t counter_ = 0;
};

}  // namespace hsd
