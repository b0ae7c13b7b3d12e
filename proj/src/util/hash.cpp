// SPDX-License-Identifier: Apache-2.0
#include "anop/util/hash.hpp"

#include <cstdio>
#include <cstring>

namespace anop {

void Fnv1a::update(std::span<const std::byte> bytes) {
  for (std::byte b : bytes) {
    state_ ^= static_cast<std::uint64_t>(b);
    state_ *= 0x100000001b3ULL;
  }
}

void Fnv1a::update(std::string_view text) { update(std::as_bytes(std::span(text.data(), text.size()))); }

void Fnv1a::update(std::span<const double> values) { update(std::as_bytes(values)); }

std::string Fnv1a::hex() const {
  char buf[17];
  std::snprintf(buf, sizeof(buf), "%016llx", static_cast<unsigned long long>(state_));
  return buf;
}

std::string hex_digest(std::string_view text) {
  Fnv1a h;
  h.update(text);
  return h.hex();
}

}  // namespace anop
