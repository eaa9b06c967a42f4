#pragma once

#include <cstdint>
#include <random>
#include <string>
#include <string_view>

namespace fluiddiff {

/// Seeded 64-bit generator with a fixed normal-variate transform, so that
/// sample streams are identical across standard libraries.
class Rng {
 public:
  static constexpr std::string_view kGeneratorName = "mt19937_64/box-muller";

  explicit Rng(std::uint64_t seed = 0) : engine_(seed) {}

  std::uint64_t next_u64() { return engine_(); }

  /// Uniform on [0, 1) with 53 random bits.
  double uniform() { return static_cast<double>(engine_() >> 11) * 0x1.0p-53; }

  double uniform(double lo, double hi) { return lo + (hi - lo) * uniform(); }

  /// Unbiased integer in [lo, hi] (inclusive).
  std::uint64_t uniform_int(std::uint64_t lo, std::uint64_t hi);

  /// Standard normal variate via the cosine branch of Box-Muller.
  double normal();

  std::string save_state() const;
  void load_state(const std::string& state);

 private:
  std::mt19937_64 engine_;
};

/// SplitMix64 finalizer applied to base + golden-ratio * index; used to derive
/// independent per-scene / per-iteration seeds.
std::uint64_t mix_seed(std::uint64_t base, std::uint64_t index);

}  // namespace fluiddiff
