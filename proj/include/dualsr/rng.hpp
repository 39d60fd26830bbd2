#pragma once

#include <cstdint>
#include <initializer_list>
#include <string_view>

namespace dualsr {

std::uint64_t splitmix64(std::uint64_t x);
std::uint64_t fnv1a64(std::string_view bytes);

// Folds a list of identifiers (seed, image index, op index, ...) into one key.
std::uint64_t derive_key(std::initializer_list<std::uint64_t> parts);
std::uint64_t derive_key(std::uint64_t seed, std::string_view name);

// Counter-based generator: draw i is a pure function of (key, i), so
// streams keyed by (seed, index, op) do not depend on evaluation order.
// Samplers are written out here rather than taken from <random> because the
// standard distributions are implementation-defined.
class CounterRng {
 public:
  explicit CounterRng(std::uint64_t key, std::uint64_t counter = 0) : key_(key), counter_(counter) {}

  std::uint64_t key() const { return key_; }
  std::uint64_t counter() const { return counter_; }

  std::uint64_t next_u64() { return splitmix64(key_ ^ splitmix64(counter_++)); }
  // [0, 1) with 53 random bits.
  double uniform() { return static_cast<double>(next_u64() >> 11) * 0x1.0p-53; }
  double uniform(double lo, double hi) { return lo + (hi - lo) * uniform(); }
  // Inclusive range.
  int uniform_int(int lo, int hi);
  bool bernoulli(double p) { return uniform() < p; }
  double normal();
  long poisson(double lambda);

 private:
  std::uint64_t key_;
  std::uint64_t counter_;
};

}  // namespace dualsr
