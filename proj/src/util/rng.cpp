// SPDX-License-Identifier: Apache-2.0
#include "anop/util/rng.hpp"

#include <cmath>

#include "anop/util/hash.hpp"

namespace anop {
namespace {

std::uint64_t splitmix64(std::uint64_t x) {
  x += 0x9e3779b97f4a7c15ULL;
  x = (x ^ (x >> 30)) * 0xbf58476d1ce4e5b9ULL;
  x = (x ^ (x >> 27)) * 0x94d049bb133111ebULL;
  return x ^ (x >> 31);
}

}  // namespace

std::uint64_t derive_seed(std::uint64_t base, std::string_view stream) {
  Fnv1a h;
  h.update(stream);
  return splitmix64(splitmix64(base) ^ h.value());
}

std::uint64_t derive_seed(std::uint64_t base, std::uint64_t index) {
  return splitmix64(splitmix64(base) ^ splitmix64(index + 0x51ed270b27aULL));
}

double Rng::gumbel() {
  double u = uniform();
  // uniform() may return exactly 0; the open interval keeps the draw finite.
  while (u <= 0.0) u = uniform();
  return -std::log(-std::log(u));
}

}  // namespace anop
