#pragma once

#include <boost/random/normal_distribution.hpp>

#include <cmath>
#include <cstdint>
#include <numbers>
#include <random>
#include <string_view>

namespace polymerlab {

/// splitmix64 finalizer; a bijective 64-bit mixer.
constexpr std::uint64_t mix64(std::uint64_t z) noexcept {
  z += 0x9e3779b97f4a7c15ULL;
  z = (z ^ (z >> 30)) * 0xbf58476d1ce4e5b9ULL;
  z = (z ^ (z >> 27)) * 0x94d049bb133111ebULL;
  return z ^ (z >> 31);
}

constexpr std::uint64_t fnv1a(std::string_view text) noexcept {
  std::uint64_t h = 0xcbf29ce484222325ULL;
  for (char c : text) {
    h ^= static_cast<unsigned char>(c);
    h *= 0x100000001b3ULL;
  }
  return h;
}

constexpr std::uint64_t hash_combine(std::uint64_t a, std::uint64_t b) noexcept {
  return mix64(a ^ mix64(b + 0x632be59bd9b4e019ULL));
}

/// Reproducible seed provenance: every sampler output is a pure function of
/// (master, id). Children are derived by hashing a purpose tag and an index.
struct SeedStream {
  std::uint64_t master = 0;
  std::uint64_t id = 0;

  SeedStream child(std::string_view tag, std::uint64_t index = 0) const noexcept {
    return {master, hash_combine(hash_combine(id, fnv1a(tag)), index)};
  }

  std::uint64_t key() const noexcept { return hash_combine(master, id); }

  std::mt19937_64 engine() const {
    const std::uint64_t k = key();
    std::seed_seq seq{static_cast<std::uint32_t>(k), static_cast<std::uint32_t>(k >> 32),
                      static_cast<std::uint32_t>(master), static_cast<std::uint32_t>(master >> 32)};
    return std::mt19937_64(seq);
  }

  friend bool operator==(const SeedStream&, const SeedStream&) = default;
};

inline SeedStream root_stream(std::uint64_t master_seed) { return {master_seed, 0}; }

/// Uniform in the open interval (0,1) from the top 53 bits of a hash.
inline double open_unit(std::uint64_t bits) noexcept {
  return (static_cast<double>(bits >> 11) + 0.5) * 0x1.0p-53;
}

/// splitmix64 as a uniform random bit generator; used to turn one hash into
/// the few words a rejection sampler may need.
struct SplitMix64 {
  using result_type = std::uint64_t;
  std::uint64_t state = 0;

  static constexpr result_type min() { return 0; }
  static constexpr result_type max() { return ~result_type(0); }
  result_type operator()() noexcept {
    state += 0x9e3779b97f4a7c15ULL;
    return mix64(state);
  }
};

/// Counter-based standard normal: a pure function of (key, a, b). Boost's
/// ziggurat sampler driven by a splitmix64 stream started at the hash.
inline double counter_normal(std::uint64_t key, std::uint64_t a, std::uint64_t b) noexcept {
  SplitMix64 bits{hash_combine(hash_combine(key, a), b)};
  return boost::random::normal_distribution<double>()(bits);
}

}  // namespace polymerlab
