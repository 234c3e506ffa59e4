#pragma once

#include <cstdint>
#include <string_view>
#include <vector>

namespace dfams {

/// splitmix64 step; used to derive independent stage seeds from one global seed.
std::uint64_t splitmix64(std::uint64_t& state);

/// Derives a child seed from a parent seed and a stage label.
std::uint64_t derive_seed(std::uint64_t parent, std::string_view label);

/// Small deterministic generator (xoshiro256**). All sampling is done with
/// explicit bit manipulation so results do not depend on the standard
/// library's distribution implementations.
class Rng {
 public:
  explicit Rng(std::uint64_t seed);

  std::uint64_t next_u64();
  /// Uniform in [0, 1).
  double uniform();
  double uniform(double lo, double hi) { return lo + (hi - lo) * uniform(); }
  /// Uniform integer in [0, n).
  std::uint64_t below(std::uint64_t n);
  double normal();
  bool bernoulli(double p) { return uniform() < p; }

  template <typename T>
  void shuffle(std::vector<T>& v) {
    for (std::size_t i = v.size(); i > 1; --i) {
      std::size_t j = below(i);
      std::swap(v[i - 1], v[j]);
    }
  }

 private:
  std::uint64_t s_[4];
};

}  // namespace dfams
