#include "hatdiag/rng.hpp"

#include <cmath>
#include <numbers>

namespace hatdiag {

std::uint64_t splitmix64(std::uint64_t x) noexcept {
  x += 0x9e3779b97f4a7c15ULL;
  x = (x ^ (x >> 30)) * 0xbf58476d1ce4e5b9ULL;
  x = (x ^ (x >> 27)) * 0x94d049bb133111ebULL;
  return x ^ (x >> 31);
}

std::uint64_t fnv1a64(std::string_view s) noexcept {
  std::uint64_t h = 0xcbf29ce484222325ULL;
  for (unsigned char c : s) {
    h ^= c;
    h *= 0x100000001b3ULL;
  }
  return h;
}

RngStream::RngStream(std::uint64_t seed, std::string label)
    : seed_(seed), label_(std::move(label)), engine_(splitmix64(seed ^ splitmix64(fnv1a64(label_)))) {}

RngStream RngStream::child(std::string_view sublabel) const {
  return RngStream(seed_, label_ + "/" + std::string(sublabel));
}

RngStream RngStream::child(std::string_view sublabel, std::uint64_t index) const {
  return RngStream(seed_, label_ + "/" + std::string(sublabel) + "#" + std::to_string(index));
}

std::uint64_t RngStream::next_u64() {
  ++counter_;
  return engine_();
}

double RngStream::uniform() { return static_cast<double>(next_u64() >> 11) * 0x1.0p-53; }

double RngStream::uniform(double lo, double hi) { return lo + (hi - lo) * uniform(); }

double RngStream::normal() {
  if (has_spare_) {
    has_spare_ = false;
    return spare_;
  }
  // Box-Muller on (0,1] x [0,1).
  const double u1 = 1.0 - uniform();
  const double u2 = uniform();
  const double r = std::sqrt(-2.0 * std::log(u1));
  const double theta = 2.0 * std::numbers::pi * u2;
  spare_ = r * std::sin(theta);
  has_spare_ = true;
  return r * std::cos(theta);
}

double RngStream::normal(double mean, double stddev) { return mean + stddev * normal(); }

bool RngStream::bernoulli(double p) { return uniform() < p; }

}  // namespace hatdiag
