#pragma once

#include <cmath>
#include <cstdint>

namespace resdiff {

// 64-bit finalizer used as the core of the counter generator below.
inline std::uint64_t mix64(std::uint64_t z) {
  z = (z ^ (z >> 30)) * 0xbf58476d1ce4e5b9ull;
  z = (z ^ (z >> 27)) * 0x94d049bb133111ebull;
  return z ^ (z >> 31);
}

// Derives an independent stream key from a base seed and up to three ids.
// Every stochastic job (a sampling run, a training draw, a phantom pair)
// seeds its own generator through this, so results do not depend on how
// work is scheduled across threads.
inline std::uint64_t stream_key(std::uint64_t seed, std::uint64_t a,
                                std::uint64_t b = 0, std::uint64_t c = 0) {
  std::uint64_t k = mix64(seed + 0x9e3779b97f4a7c15ull);
  k = mix64(k ^ (a + 0x9e3779b97f4a7c15ull));
  k = mix64(k ^ (b + 0xd1b54a32d192ed03ull));
  k = mix64(k ^ (c + 0x8ebc6af09c88c6e3ull));
  return k;
}

// Counter-mode generator: output i is mix64(key + i * golden), the
// splitmix64 walk. Draws are a pure function of (key, counter).
class CounterRng {
 public:
  explicit CounterRng(std::uint64_t key) : key_(key) {}

  std::uint64_t next_u64() {
    return mix64(key_ + 0x9e3779b97f4a7c15ull * ++counter_);
  }

  // Uniform on (0, 1); never returns an endpoint so log() stays finite.
  double uniform() {
    return (static_cast<double>(next_u64() >> 11) + 0.5) * 0x1.0p-53;
  }

  // Uniform integer in [0, n).
  std::int64_t uniform_int(std::int64_t n) {
    return static_cast<std::int64_t>(next_u64() % static_cast<std::uint64_t>(n));
  }

  // Standard normal via Box-Muller; the paired draw is cached.
  double normal() {
    if (has_spare_) {
      has_spare_ = false;
      return spare_;
    }
    const double u1 = uniform();
    const double u2 = uniform();
    const double r = std::sqrt(-2.0 * std::log(u1));
    const double theta = 6.283185307179586476925286766559 * u2;
    spare_ = r * std::sin(theta);
    has_spare_ = true;
    return r * std::cos(theta);
  }

 private:
  std::uint64_t key_ = 0;
  std::uint64_t counter_ = 0;
  bool has_spare_ = false;
  double spare_ = 0.0;
};

}  // namespace resdiff
