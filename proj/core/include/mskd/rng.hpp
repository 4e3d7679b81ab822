#pragma once

#include <cstdint>
#include <random>
#include <string_view>
#include <vector>

namespace mskd {

/// Deterministic random source. All sampling helpers are implemented on top
/// of the raw 64-bit stream so that results are identical across platforms
/// and standard library versions (std distributions are not portable).
///
/// fork(label) derives an independent child stream from the parent's seed
/// and the label alone; it does not advance the parent, and the same label
/// always yields the same child.
class Rng {
 public:
  explicit Rng(std::uint64_t seed);

  Rng fork(std::string_view label) const;

  std::uint64_t next_u64() { return gen_(); }

  /// Uniform in [0, 1).
  double uniform();
  double uniform(double lo, double hi);

  /// Standard normal via Box-Muller.
  double normal();
  double normal(double mean, double stddev);

  /// Uniform integer in [0, n). n must be positive.
  std::uint64_t uniform_int(std::uint64_t n);

  bool bernoulli(double p);

  template <class T>
  void shuffle(std::vector<T>& v) {
    for (std::size_t i = v.size(); i > 1; --i) {
      std::swap(v[i - 1], v[static_cast<std::size_t>(uniform_int(i))]);
    }
  }

  std::uint64_t seed() const { return seed_; }

 private:
  std::uint64_t seed_ = 0;
  std::mt19937_64 gen_;
  bool has_cached_ = false;
  double cached_ = 0.0;
};

/// SplitMix64 finalizer, used for seed derivation.
std::uint64_t mix64(std::uint64_t x);

}  // namespace mskd
