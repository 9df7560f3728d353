#pragma once

#include <cstdint>
#include <random>
#include <string>
#include <string_view>

namespace hatdiag {

std::uint64_t splitmix64(std::uint64_t x) noexcept;
std::uint64_t fnv1a64(std::string_view s) noexcept;

/// Labelled random stream. The engine is std::mt19937_64 (bit-exact by the
/// standard); the uniform and normal transforms are written out here so draws do
/// not depend on the standard library's distribution implementations.
class RngStream {
 public:
  RngStream(std::uint64_t seed, std::string label);

  /// Independent stream for a sub-purpose, e.g. `rng.child("layer0/read")`.
  RngStream child(std::string_view sublabel) const;
  RngStream child(std::string_view sublabel, std::uint64_t index) const;

  double uniform();                      // [0, 1)
  double uniform(double lo, double hi);  // [lo, hi)
  double normal();                       // N(0, 1)
  double normal(double mean, double stddev);
  bool bernoulli(double p);
  std::uint64_t next_u64();

  std::uint64_t seed() const noexcept { return seed_; }
  const std::string& label() const noexcept { return label_; }
  std::uint64_t counter() const noexcept { return counter_; }

 private:
  std::uint64_t seed_;
  std::string label_;
  std::mt19937_64 engine_;
  std::uint64_t counter_ = 0;
  bool has_spare_ = false;
  double spare_ = 0.0;
};

}  // namespace hatdiag
