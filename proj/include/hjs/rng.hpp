#pragma once

#include <array>
#include <cstdint>
#include <limits>
#include <random>

namespace hjs {

/// SplitMix64 finalizer. Used to expand a root seed into independent stream seeds.
constexpr std::uint64_t splitmix64(std::uint64_t x) noexcept {
  x += 0x9E3779B97F4A7C15ULL;
  x = (x ^ (x >> 30)) * 0xBF58476D1CE4E5B9ULL;
  x = (x ^ (x >> 27)) * 0x94D049BB133111EBULL;
  return x ^ (x >> 31);
}

/// xoshiro256++ generator satisfying UniformRandomBitGenerator.
class Xoshiro256pp {
 public:
  using result_type = std::uint64_t;

  explicit Xoshiro256pp(std::uint64_t seed = 0) noexcept {
    std::uint64_t x = seed;
    for (auto& w : state_) {
      x += 0x9E3779B97F4A7C15ULL;
      w = splitmix64(x);
    }
  }

  static constexpr result_type min() noexcept { return 0; }
  static constexpr result_type max() noexcept { return std::numeric_limits<result_type>::max(); }

  result_type operator()() noexcept {
    const std::uint64_t result = rotl(state_[0] + state_[3], 23) + state_[0];
    const std::uint64_t t = state_[1] << 17;
    state_[2] ^= state_[0];
    state_[3] ^= state_[1];
    state_[1] ^= state_[2];
    state_[0] ^= state_[3];
    state_[2] ^= t;
    state_[3] = rotl(state_[3], 45);
    return result;
  }

  /// Uniform double in [0, 1) with 53 random bits.
  double uniform() noexcept { return static_cast<double>((*this)() >> 11) * 0x1.0p-53; }

 private:
  static constexpr std::uint64_t rotl(std::uint64_t x, int k) noexcept {
    return (x << k) | (x >> (64 - k));
  }
  std::array<std::uint64_t, 4> state_{};
};

/// Seed of sub-stream `index` under `root`.
///
/// Counter-based: the seed of stream j depends only on (root, j), so growing the
/// number of paths never reshuffles the noise seen by earlier paths.
constexpr std::uint64_t stream_seed(std::uint64_t root, std::uint64_t index) noexcept {
  return splitmix64(splitmix64(root) ^ splitmix64(index * 0xD1B54A32D192ED03ULL + 1));
}

/// Distinct root for a named purpose (training noise vs. inference noise, ...).
constexpr std::uint64_t derive_seed(std::uint64_t root, std::uint64_t purpose) noexcept {
  return splitmix64(root ^ splitmix64(purpose + 0xA0761D6478BD642FULL));
}

/// A per-path standard normal source.
class NormalStream {
 public:
  explicit NormalStream(std::uint64_t seed) : gen_(seed) {}
  NormalStream(std::uint64_t root, std::uint64_t index) : gen_(stream_seed(root, index)) {}

  double operator()() { return normal_(gen_); }
  double uniform() { return gen_.uniform(); }
  Xoshiro256pp& engine() { return gen_; }

 private:
  Xoshiro256pp gen_;
  std::normal_distribution<double> normal_{0.0, 1.0};
};

}  // namespace hjs
