#ifndef CTRACE_RNG_HPP_
#define CTRACE_RNG_HPP_

#include <cstdint>
#include <random>

namespace ctrace {

// splitmix64 mixing step (Steele et al.). Used to derive independent
// substream seeds from one base seed.
inline std::uint64_t splitmix64(std::uint64_t x) {
  x += 0x9e3779b97f4a7c15ULL;
  x = (x ^ (x >> 30)) * 0xbf58476d1ce4e5b9ULL;
  x = (x ^ (x >> 27)) * 0x94d049bb133111ebULL;
  return x ^ (x >> 31);
}

// Deterministic seed for substream `stream` of `base`. Distinct streams of
// the same base never collide in practice; the same (base, stream) pair
// always yields the same seed.
inline std::uint64_t derive_seed(std::uint64_t base, std::uint64_t stream) {
  return splitmix64(base ^ splitmix64(stream + 1));
}

inline std::mt19937_64 make_engine(std::uint64_t seed) {
  return std::mt19937_64(seed);
}

}  // namespace ctrace

#endif  // CTRACE_RNG_HPP_
