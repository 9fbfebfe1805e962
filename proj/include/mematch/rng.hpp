#pragma once

#include <cmath>
#include <cstdint>
#include <string_view>
#include <vector>

#include "mematch/error.hpp"

namespace mematch {

// Deterministic splitmix64 generator. All randomness in the project flows from
// one root seed through named sub-streams (derive), so every component is
// reproducible on its own and the full generator state is two words.
class Rng {
 public:
  explicit Rng(std::uint64_t seed) : state_(seed) {}

  std::uint64_t next_u64() {
    state_ += 0x9E3779B97F4A7C15ull;
    return mix(state_);
  }

  // Uniform in [0, 1) with 53 bits.
  double next_double() { return static_cast<double>(next_u64() >> 11) * 0x1.0p-53; }

  double uniform(double lo, double hi) { return lo + (hi - lo) * next_double(); }

  // Uniform integer in [0, n).
  std::uint64_t uniform_int(std::uint64_t n) {
    if (n == 0) throw ValueError("uniform_int: n must be positive");
    return next_u64() % n;
  }

  int range(int lo, int hi_inclusive) {
    if (hi_inclusive < lo) throw ValueError("range: empty interval");
    return lo + static_cast<int>(uniform_int(static_cast<std::uint64_t>(hi_inclusive - lo + 1)));
  }

  // Box-Muller; one draw per call, the sine branch is discarded.
  double normal() {
    double u1 = next_double();
    double u2 = next_double();
    if (u1 < 1e-300) u1 = 1e-300;
    return std::sqrt(-2.0 * std::log(u1)) * std::cos(6.283185307179586 * u2);
  }

  template <class T>
  void shuffle(std::vector<T>& v) {
    for (std::size_t i = v.size(); i > 1; --i) {
      std::size_t j = uniform_int(i);
      std::swap(v[i - 1], v[j]);
    }
  }

  // Child stream; does not advance the parent.
  Rng derive(std::uint64_t index) const { return Rng(mix(state_ ^ mix(index + 0x6A09E667F3BCC909ull))); }

  Rng derive(std::string_view label) const {
    std::uint64_t h = 0xCBF29CE484222325ull;  // FNV-1a
    for (char c : label) {
      h ^= static_cast<unsigned char>(c);
      h *= 0x100000001B3ull;
    }
    return Rng(mix(state_ ^ h));
  }

  std::uint64_t state() const { return state_; }
  void set_state(std::uint64_t s) { state_ = s; }

 private:
  static std::uint64_t mix(std::uint64_t z) {
    z ^= z >> 30;
    z *= 0xBF58476D1CE4E5B9ull;
    z ^= z >> 27;
    z *= 0x94D049BB133111EBull;
    z ^= z >> 31;
    return z;
  }

  std::uint64_t state_;
};

}  // namespace mematch
