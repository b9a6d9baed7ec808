#pragma once

#include <cmath>
#include <cstdint>
#include <string_view>
#include <vector>

namespace pairdiff {

// Counter-based splittable generator. Each draw hashes (key, counter) with the
// SplitMix64 finalizer, so a stream is fully determined by its key and the
// number of draws made; split() derives an independent child key without
// consuming any state from the parent. Splitting the same label twice yields
// the same child stream on purpose (used for per-timestep cached noise).
class Rng {
 public:
  explicit Rng(std::uint64_t seed) : key_(mix(seed ^ 0x5bf0f1ecb3e1f9c1ULL)) {}

  std::uint64_t next_u64() { return mix(key_ + 0x9e3779b97f4a7c15ULL * ++ctr_); }

  // uniform in [0, 1)
  double next_unit() { return static_cast<double>(next_u64() >> 11) * 0x1.0p-53; }

  // standard normal via Box-Muller; caches the second value of each pair
  double next_gauss() {
    if (have_spare_) {
      have_spare_ = false;
      return spare_;
    }
    double u1 = 1.0 - next_unit();  // (0, 1], keeps the log finite
    double u2 = next_unit();
    double r = std::sqrt(-2.0 * std::log(u1));
    double a = 6.283185307179586476925286766559 * u2;
    spare_ = r * std::sin(a);
    have_spare_ = true;
    return r * std::cos(a);
  }

  Rng split(std::uint64_t label) const {
    Rng child(0);
    child.key_ = mix(key_ ^ mix(label ^ 0xd6e8feb86659fd93ULL));
    child.ctr_ = 0;
    child.have_spare_ = false;
    return child;
  }

  Rng split(std::string_view label) const { return split(fnv1a(label)); }

  void fill_gauss(std::vector<double>& out) {
    for (double& v : out) v = next_gauss();
  }

  static std::uint64_t fnv1a(std::string_view s) {
    std::uint64_t h = 0xcbf29ce484222325ULL;
    for (char c : s) {
      h ^= static_cast<unsigned char>(c);
      h *= 0x100000001b3ULL;
    }
    return h;
  }

 private:
  static std::uint64_t mix(std::uint64_t z) {
    z = (z ^ (z >> 30)) * 0xbf58476d1ce4e5b9ULL;
    z = (z ^ (z >> 27)) * 0x94d049bb133111ebULL;
    return z ^ (z >> 31);
  }

  std::uint64_t key_;
  std::uint64_t ctr_ = 0;
  bool have_spare_ = false;
  double spare_ = 0.0;
};

}  // namespace pairdiff
