#pragma once

#include <cmath>
#include <cstdint>
#include <string_view>

namespace psg {

// 64-bit FNV-1a. Used for text hashing (embedding files) and seed derivation.
inline uint64_t fnv1a(const void* data, size_t len, uint64_t h = 0xcbf29ce484222325ull) {
  const auto* p = static_cast<const unsigned char*>(data);
  for (size_t i = 0; i < len; ++i) {
    h ^= p[i];
    h *= 0x100000001b3ull;
  }
  return h;
}

inline uint64_t fnv1a(std::string_view s) { return fnv1a(s.data(), s.size()); }

inline uint64_t mix_seed(uint64_t seed, uint64_t salt) {
  uint64_t z = seed + 0x9e3779b97f4a7c15ull * (salt + 1);
  z = (z ^ (z >> 30)) * 0xbf58476d1ce4e5b9ull;
  z = (z ^ (z >> 27)) * 0x94d049bb133111ebull;
  return z ^ (z >> 31);
}

// splitmix64 generator. Self-contained so that streams are identical across
// platforms and standard libraries (std distributions are not portable).
class Rng {
 public:
  explicit Rng(uint64_t seed) : state_(seed) {}

  uint64_t next_u64() {
    uint64_t z = (state_ += 0x9e3779b97f4a7c15ull);
    z = (z ^ (z >> 30)) * 0xbf58476d1ce4e5b9ull;
    z = (z ^ (z >> 27)) * 0x94d049bb133111ebull;
    return z ^ (z >> 31);
  }

  // uniform in [0, 1)
  float uniform() {
    return static_cast<float>((next_u64() >> 40) * (1.0 / 16777216.0));
  }

  float uniform(float lo, float hi) { return lo + (hi - lo) * uniform(); }

  // standard normal via Box-Muller (pairs cached)
  float normal() {
    if (have_spare_) {
      have_spare_ = false;
      return spare_;
    }
    float u1 = 0.0f, u2 = 0.0f;
    do {
      u1 = uniform();
    } while (u1 <= 1e-12f);
    u2 = uniform();
    const float r = std::sqrt(-2.0f * std::log(u1));
    const float a = 6.283185307179586f * u2;
    spare_ = r * std::sin(a);
    have_spare_ = true;
    return r * std::cos(a);
  }

  // Fisher-Yates index for shuffles: uniform integer in [0, n)
  size_t below(size_t n) { return static_cast<size_t>(next_u64() % n); }

 private:
  uint64_t state_;
  float spare_ = 0.0f;
  bool have_spare_ = false;
};

}  // namespace psg
