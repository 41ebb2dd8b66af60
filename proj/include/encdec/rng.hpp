#pragma once

#include <cstdint>
#include <random>
#include <span>
#include <utility>

namespace encdec {

// splitmix64 finalizer; used to derive independent per-example streams.
std::uint64_t mix_seed(std::uint64_t global_seed, std::uint64_t index);

// Seeded generator with distribution transforms written out explicitly, so
// sequences do not depend on the standard library's distribution classes
// (those are implementation-defined).
class Rng {
 public:
  explicit Rng(std::uint64_t seed) : engine_(seed) {}

  std::uint64_t next_u64() { return engine_(); }
  // [0, 1) with 53 random bits.
  double uniform();
  // Uniform in [0, n); n > 0. Rejection sampling, no modulo bias.
  std::uint64_t below(std::uint64_t n);
  bool bernoulli(double p) { return uniform() < p; }
  double normal();
  // Normal(0, stddev) redrawn until within two standard deviations.
  double truncated_normal(double stddev);

  template <typename T>
  void shuffle(std::span<T> items) {
    for (std::size_t i = items.size(); i > 1; --i) {
      std::swap(items[i - 1], items[below(i)]);
    }
  }
  template <typename Container>
  void shuffle(Container& c) {
    shuffle(std::span(c));
  }

 private:
  std::mt19937_64 engine_;
};

}  // namespace encdec
