#pragma once

#include <cstddef>
#include <cstdint>
#include <span>
#include <utility>
#include <vector>

namespace agentguard {

// splitmix64. Self-contained so corpora are identical across standard
// libraries (std::uniform_*_distribution is implementation-defined).
class SplitMix64 {
 public:
  explicit SplitMix64(std::uint64_t seed) noexcept : state_(seed) {}

  // Independent stream for item `ordinal` under a corpus seed.
  static SplitMix64 for_stream(std::uint64_t seed, std::uint64_t ordinal) noexcept {
    SplitMix64 mixer(seed ^ (ordinal * 0xD1B54A32D192ED03ULL));
    return SplitMix64(mixer.next() ^ ordinal);
  }

  std::uint64_t next() noexcept {
    std::uint64_t z = (state_ += 0x9E3779B97F4A7C15ULL);
    z = (z ^ (z >> 30)) * 0xBF58476D1CE4E5B9ULL;
    z = (z ^ (z >> 27)) * 0x94D049BB133111EBULL;
    return z ^ (z >> 31);
  }

  // Uniform in [0, 1) with 53 bits of precision.
  double uniform() noexcept { return static_cast<double>(next() >> 11) * 0x1.0p-53; }

  // Uniform integer in [0, n). Lemire's multiply-shift; the tiny bias is
  // irrelevant for template selection and keeps the mapping portable.
  std::size_t below(std::size_t n) noexcept {
    if (n == 0) return 0;
    return static_cast<std::size_t>((static_cast<unsigned __int128>(next()) * n) >> 64);
  }

  bool bernoulli(double p) noexcept { return uniform() < p; }

  template <typename T>
  const T& pick(std::span<const T> items) noexcept {
    return items[below(items.size())];
  }

  template <typename T>
  const T& pick(const std::vector<T>& items) noexcept {
    return items[below(items.size())];
  }

  // Index drawn proportionally to non-negative weights.
  std::size_t weighted(std::span<const double> weights) noexcept {
    double total = 0.0;
    for (double w : weights) total += w;
    double u = uniform() * total;
    for (std::size_t i = 0; i < weights.size(); ++i) {
      if (u < weights[i]) return i;
      u -= weights[i];
    }
    return weights.size() - 1;
  }

  template <typename T>
  void shuffle(std::vector<T>& items) noexcept {
    for (std::size_t i = items.size(); i > 1; --i) {
      std::swap(items[i - 1], items[below(i)]);
    }
  }

 private:
  std::uint64_t state_;
};

}  // namespace agentguard
