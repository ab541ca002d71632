#include "bil/rng.hpp"

namespace bil {

namespace {

std::uint64_t splitmix64(std::uint64_t x) {
  x += 0x9e3779b97f4a7c15ULL;
  x = (x ^ (x >> 30)) * 0xbf58476d1ce4e5b9ULL;
  x = (x ^ (x >> 27)) * 0x94d049bb133111ebULL;
  return x ^ (x >> 31);
}

}  // namespace

std::uint64_t derive_seed(std::uint64_t seed, std::uint64_t stage, std::uint64_t role) {
  std::uint64_t h = splitmix64(seed);
  h = splitmix64(h ^ (stage * 0x9e3779b97f4a7c15ULL));
  h = splitmix64(h ^ (role * 0xc2b2ae3d27d4eb4fULL));
  return h;
}

}  // namespace bil
