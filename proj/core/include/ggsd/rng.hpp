#pragma once

#include <cmath>
#include <cstdint>
#include <random>

namespace ggsd {

// Deterministic RNG. std::mt19937_64 output is fixed by the standard, but the
// standard distributions are implementation defined, so uniform/normal are
// derived here by hand. Same seed means bit-identical streams everywhere.
class Rng {
 public:
  explicit Rng(std::uint64_t seed) : gen_(seed) {}

  std::uint64_t next_u64() { return gen_(); }

  // [0, 1) with 53 bits of entropy.
  double uniform() { return static_cast<double>(gen_() >> 11) * 0x1.0p-53; }

  // (0, 1], never returns 0 (safe for log()).
  double uniform_pos() { return 1.0 - uniform(); }

  // Box-Muller; caches the second deviate.
  double normal() {
    if (has_spare_) {
      has_spare_ = false;
      return spare_;
    }
    const double u1 = uniform_pos();
    const double u2 = uniform();
    const double r = std::sqrt(-2.0 * std::log(u1));
    const double a = 2.0 * M_PI * u2;
    spare_ = r * std::sin(a);
    has_spare_ = true;
    return r * std::cos(a);
  }

  // Inclusive range. Modulo bias is irrelevant at 64 bits for desk-scale ranges.
  int uniform_int(int lo, int hi) {
    const std::uint64_t span = static_cast<std::uint64_t>(hi - lo) + 1;
    return lo + static_cast<int>(gen_() % span);
  }

  bool bernoulli(double p) { return uniform() < p; }

 private:
  std::mt19937_64 gen_;
  double spare_ = 0.0;
  bool has_spare_ = false;
};

// Stateless mix for deriving independent sub-seeds, e.g. per graph or chain.
inline std::uint64_t derive_seed(std::uint64_t seed, std::uint64_t index) {
  std::uint64_t z = seed + 0x9e3779b97f4a7c15ULL * (index + 1);
  z = (z ^ (z >> 30)) * 0xbf58476d1ce4e5b9ULL;
  z = (z ^ (z >> 27)) * 0x94d049bb133111ebULL;
  return z ^ (z >> 31);
}

}  // namespace ggsd
