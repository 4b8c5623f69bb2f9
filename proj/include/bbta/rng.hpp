#pragma once

#include <cmath>
#include <cstdint>
#include <initializer_list>

namespace bbta::rng {

inline constexpr std::uint64_t kGolden = 0x9e3779b97f4a7c15ull;

/// splitmix64 finalizer; full avalanche on 64 bits.
inline std::uint64_t mix(std::uint64_t z) {
  z = (z ^ (z >> 30)) * 0xbf58476d1ce4e5b9ull;
  z = (z ^ (z >> 27)) * 0x94d049bb133111ebull;
  return z ^ (z >> 31);
}

/// Folds one labeled component into a key.
inline std::uint64_t combine(std::uint64_t key, std::uint64_t value) {
  return mix(key + kGolden + value);
}

/// Builds a stream key from a root seed and a list of labels
/// (tag, epoch, batch, sample, ...). Identical labels give identical
/// keys regardless of where or when the stream is created, which is
/// what makes parallel execution order-independent.
inline std::uint64_t key(std::uint64_t seed, std::initializer_list<std::uint64_t> labels) {
  std::uint64_t k = mix(seed + kGolden);
  for (std::uint64_t v : labels) k = combine(k, v);
  return k;
}

// Labels for the independent random streams used across the project.
// Values are arbitrary but must never be reused for two purposes.
enum Tag : std::uint64_t {
  kDatasetGen = 1,
  kCorrupt = 2,
  kDeployedInit = 3,
  kDeployedShuffle = 4,
  kAdaptorInit = 5,
  kCeDirections = 6,
  kMiDirections = 7,
  kEpochShuffle = 8,
  kLabelFlip = 9,
  kPixelCeDirections = 10,
  kPixelMiDirections = 11,
  kPgdDirections = 12,
  kOnlineShuffle = 13,
  kTrialDirections = 14,
  kOnlineCeDirections = 15,
  kOnlineMiDirections = 16,
};

/// Counter-based generator: the n-th output is a pure function of
/// (key, n), i.e. the stream can be recreated anywhere and never
/// depends on sharing state between threads.
class Stream {
 public:
  explicit Stream(std::uint64_t stream_key) : key_(stream_key) {}

  Stream(std::uint64_t seed, std::initializer_list<std::uint64_t> labels)
      : key_(key(seed, labels)) {}

  std::uint64_t next_u64() { return mix(key_ + kGolden * ++counter_); }

  /// Uniform in the open interval (0,1); never returns 0 or 1.
  double uniform() { return (static_cast<double>(next_u64() >> 11) + 0.5) * 0x1.0p-53; }

  /// Uniform integer in [0, n).
  std::uint64_t uniform_index(std::uint64_t n) { return next_u64() % n; }

  /// Standard normal via Box-Muller; the paired draw is cached.
  double normal() {
    if (has_spare_) {
      has_spare_ = false;
      return spare_;
    }
    const double a = uniform();
    const double b = uniform();
    const double r = std::sqrt(-2.0 * std::log(a));
    const double t = 6.283185307179586476925286766559 * b;
    spare_ = r * std::sin(t);
    has_spare_ = true;
    return r * std::cos(t);
  }

 private:
  std::uint64_t key_ = 0;
  std::uint64_t counter_ = 0;
  double spare_ = 0.0;
  bool has_spare_ = false;
};

}  // namespace bbta::rng
